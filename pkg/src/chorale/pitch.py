"""Frame-wise F0 estimation and pitch arithmetic.

The estimator is a plain normalized-autocorrelation tracker with parabolic
peak interpolation. Frames whose RMS falls below a fraction of the whole
utterance RMS are declared unvoiced and reported as 0 Hz.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

VOICING_RMS_FRACTION = 0.05
MIN_PEAK_CORR = 0.3


def cents(f_a: float, f_b: float) -> float:
    """Signed pitch interval from f_b to f_a, in cents (1200 per octave)."""
    if f_a <= 0 or f_b <= 0:
        raise ValidationError(f"cents requires positive frequencies, got ({f_a}, {f_b})")
    return 1200.0 * np.log2(f_a / f_b)


def cents_array(f_a: np.ndarray, f_b: np.ndarray) -> np.ndarray:
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if np.any(f_a <= 0) or np.any(f_b <= 0):
        raise ValidationError("cents requires positive frequencies")
    return 1200.0 * np.log2(f_a / f_b)


def _frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Centered frames: frame i spans [i*hop - (win-hop)//2, ...), edge-padded."""
    n_frames = int(np.ceil(len(x) / hop))
    pad_left = (win - hop) // 2
    pad_right = max(0, (n_frames - 1) * hop + win - pad_left - len(x))
    xp = np.pad(x, (pad_left, pad_right))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return xp[idx]


def autocorr_frames(frames: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation of each row, r[lag] = acf[lag] / acf[0]."""
    win = frames.shape[1]
    n_fft = int(2 ** np.ceil(np.log2(2 * win)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=n_fft, axis=1)[:, :win]
    r0 = acf[:, :1].copy()
    r0[r0 <= 0] = 1.0
    return acf / r0


def periodicity_pick(
    frames: np.ndarray, sample_rate: int, lag_min: int, lag_max: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per frame: (integer lag, normalized acf, peak value) of the period.

    Integer multiples of the true period, and near-coincidence lags of
    high-harmonic-dominant voices, can score almost as high as the period
    itself on raw autocorrelation. Candidate peaks are therefore re-scored
    by the spectral magnitude at the fundamental each lag implies.
    """
    win = frames.shape[1]
    n_fft = int(2 ** np.ceil(np.log2(2 * win)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = np.abs(spec) ** 2
    acf = np.fft.irfft(power, n=n_fft, axis=1)[:, :win]
    r0 = acf[:, :1].copy()
    r0[r0 <= 0] = 1.0
    r = acf / r0

    lags = np.arange(lag_min, lag_max + 1)
    rr = r[:, lag_min : lag_max + 1]
    rmax = rr.max(axis=1, keepdims=True)
    left = np.concatenate([rr[:, :1], rr[:, :-1]], axis=1)
    right = np.concatenate([rr[:, 1:], rr[:, -1:]], axis=1)
    cand = (rr >= left) & (rr >= right) & (rr >= 0.7 * rmax)

    mag = np.sqrt(power)
    bins = np.round(n_fft / lags).astype(int)
    amp = np.zeros_like(rr)
    for off in (-1, 0, 1):
        cols = np.clip(bins + off, 0, mag.shape[1] - 1)
        amp = np.maximum(amp, mag[:, cols])
    aref = amp.max(axis=1, keepdims=True)
    aref[aref <= 0] = 1.0

    score = np.where(cand, rr + 0.5 * amp / aref, -np.inf)
    no_cand = ~cand.any(axis=1)
    pick = score.argmax(axis=1)
    pick[no_cand] = rr[no_cand].argmax(axis=1)
    rows = np.arange(rr.shape[0])
    return lags[pick], r, rr[rows, pick]


def parabolic_lag(r: np.ndarray, peak_lag: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """Sub-sample lag refinement from the three acf values around the peak."""
    win = r.shape[1]
    rows = np.arange(r.shape[0])
    lags = peak_lag.astype(np.float64)
    interior = (peak_lag > lag_min) & (peak_lag < lag_max)
    y0 = r[rows, np.clip(peak_lag - 1, 0, win - 1)]
    y1 = r[rows, peak_lag]
    y2 = r[rows, np.clip(peak_lag + 1, 0, win - 1)]
    denom = y0 - 2 * y1 + y2
    ok = interior & (np.abs(denom) > 1e-12)
    shift = np.zeros_like(lags)
    shift[ok] = 0.5 * (y0[ok] - y2[ok]) / denom[ok]
    return lags + np.clip(shift, -0.5, 0.5)


def f0_estimate(
    waveform: np.ndarray,
    frame_rate: int,
    sample_rate: int,
    fmin: float = 70.0,
    fmax: float = 700.0,
) -> np.ndarray:
    """Per-frame F0 in Hz at `frame_rate` frames/s; unvoiced frames are 0.

    Voicing requires both enough frame energy (relative to the utterance)
    and a credible autocorrelation peak.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise ValidationError("f0_estimate requires a nonempty waveform")
    hop = sample_rate // frame_rate
    win = min(max(int(0.05 * sample_rate), 2 * int(sample_rate / fmin)), 4 * hop + hop)
    win = max(win, int(2 * sample_rate / fmin))
    frames = _frame_signal(waveform, win, hop)

    utter_rms = float(np.sqrt(np.mean(waveform**2)))
    frame_rms = np.sqrt(np.mean(frames**2, axis=1))
    voiced = frame_rms >= VOICING_RMS_FRACTION * utter_rms
    if utter_rms == 0:
        return np.zeros(frames.shape[0])

    lag_min = max(2, int(np.floor(sample_rate / fmax)))
    lag_max = min(win - 2, int(np.ceil(sample_rate / fmin)))
    if lag_max <= lag_min:
        raise ValidationError("f0 search range is empty for this sample rate")

    peak_lag, r, peak_val = periodicity_pick(frames, sample_rate, lag_min, lag_max)
    lags = parabolic_lag(r, peak_lag, lag_min, lag_max)
    f0 = sample_rate / lags
    f0[~voiced] = 0.0
    f0[peak_val < MIN_PEAK_CORR] = 0.0
    f0[(f0 < fmin) | (f0 > fmax)] = 0.0
    return f0
