"""Deterministic synthetic multi-singer song corpus with full ground truth.

Each song is a timeline of verse/chorus/bridge segments. Melodies are
piecewise-constant note sequences on a diatonic grid; every token occupies
a fixed note span, so lyric tokens, frames, and samples align exactly.
Voices are additive-harmonic; multi-singer segments add per-voice detune
and an exponential-decay reverb tail that acts as the texture carrier.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .config import STRUCTURE_LABELS, CorpusConfig
from .errors import (
    ConfigurationError,
    DegenerateSignalError,
    InsufficientAudioError,
    ValidationError,
)
from .pitch import parabolic_lag, periodicity_pick

REST_TOKEN = 0
VOICE_GAIN = 0.15
RAMP_S = 0.005
EMBED_N_HARMONICS = 16
EMBED_N_FFT = 1024

# Diatonic major-scale degrees spanning one octave.
SCALE_DEGREES = (0, 2, 4, 5, 7, 9, 11, 12)


@dataclass
class SingerProfile:
    """Ground-truth synthetic vocal identity."""

    id: int
    harmonic_profile: np.ndarray       # nonnegative amplitudes, sums to 1
    register_range: tuple[float, float]
    vibrato_rate: float                # Hz
    vibrato_depth: float               # cents

    def validate(self) -> None:
        p = np.asarray(self.harmonic_profile, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"singer {self.id}: harmonic_profile must be a distribution")
        f_lo, f_hi = self.register_range
        if not (80.0 <= f_lo < f_hi <= 1000.0):
            raise ValidationError(f"singer {self.id}: register_range {self.register_range} invalid")


@dataclass
class Segment:
    start: float
    end: float
    label: str
    lyric_tokens: list[int]
    f0_track: np.ndarray               # per-frame Hz, 0 = unvoiced
    active_singers: set[int]

    def validate(self) -> None:
        if self.start >= self.end:
            raise ValidationError(f"segment [{self.start}, {self.end}) is empty")
        if self.label not in STRUCTURE_LABELS:
            raise ValidationError(f"unknown structure label {self.label!r}")
        if self.label == "verse" and len(self.active_singers) != 1:
            raise ValidationError("verse segments must have exactly one active singer")
        if not self.active_singers:
            raise ValidationError("segment has no active singers")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class SongManifest:
    song_id: str
    sample_rate: int
    frame_rate: int
    segments: list[Segment]
    singer_roster: list[SingerProfile]

    def validate(self) -> None:
        roster_ids = {p.id for p in self.singer_roster}
        prev_end = 0.0
        for profile in self.singer_roster:
            profile.validate()
        for seg in self.segments:
            seg.validate()
            if seg.start < prev_end - 1e-9:
                raise ValidationError("segments must be ordered and non-overlapping")
            prev_end = seg.end
            if not seg.active_singers <= roster_ids:
                raise ValidationError(f"segment references unknown singers {seg.active_singers - roster_ids}")

    @property
    def duration(self) -> float:
        return self.segments[-1].end if self.segments else 0.0

    @property
    def n_frames(self) -> int:
        # ceil with a drift guard: durations accumulate in floating point.
        return int(np.ceil(self.duration * self.frame_rate - 1e-6))

    def gt_f0(self) -> np.ndarray:
        track = np.zeros(self.n_frames)
        for seg in self.segments:
            a = int(round(seg.start * self.frame_rate))
            track[a : a + len(seg.f0_track)] = seg.f0_track
        return track


@dataclass
class RenderedSong:
    waveform: np.ndarray
    manifest: SongManifest
    gt_f0: np.ndarray

    def segment_samples(self, seg: Segment) -> np.ndarray:
        sr = self.manifest.sample_rate
        return self.waveform[int(round(seg.start * sr)) : int(round(seg.end * sr))]


# ---------------------------------------------------------------------------
# Profile and manifest generation
# ---------------------------------------------------------------------------


def _sample_profile(rng: np.random.Generator, singer_id: int, cfg: CorpusConfig) -> SingerProfile:
    h = cfg.n_harmonics
    # A solid fundamental keeps the acoustic period unambiguous; identity
    # lives in the distribution of the upper harmonics.
    n_upper = min(3, h - 1)
    while True:
        upper = 1 + rng.choice(h - 1, size=n_upper, replace=False)
        weights = rng.dirichlet(1.5 * np.ones(n_upper))
        profile = np.full(h, 0.01)
        mass = 1.0 - profile.sum()
        w1 = float(rng.uniform(0.2, 0.3))
        profile[0] += w1 * mass
        profile[upper] += (1.0 - w1) * mass * weights
        profile /= profile.sum()
        sq = profile**2
        parity = (sq[1::2].sum() - sq[0::2].sum()) / sq.sum()  # even-h minus odd-h power
        if parity <= 0.55:
            break
    f_lo = float(rng.uniform(100.0, 150.0))
    f_hi = float(rng.uniform(360.0, 600.0))
    return SingerProfile(
        id=singer_id,
        harmonic_profile=profile,
        register_range=(f_lo, f_hi),
        vibrato_rate=float(rng.uniform(4.5, 6.5)),
        vibrato_depth=float(rng.uniform(8.0, 25.0)),
    )


def _profile_cos(a: SingerProfile, b: SingerProfile) -> float:
    # Identity is carried by the upper harmonics; the fundamental is shared
    # by construction and excluded from both this bound and the embedder.
    pa, pb = a.harmonic_profile[1:], b.harmonic_profile[1:]
    return float(np.dot(pa, pb) / (np.linalg.norm(pa) * np.linalg.norm(pb)))


def _sample_roster(rng: np.random.Generator, cfg: CorpusConfig) -> list[SingerProfile]:
    """Rejection-sample K profiles whose pairwise timbre overlap stays small."""
    roster: list[SingerProfile] = []
    attempts = 0
    while len(roster) < cfg.n_singers:
        candidate = _sample_profile(rng, len(roster), cfg)
        attempts += 1
        if all(_profile_cos(candidate, p) <= cfg.max_profile_cos for p in roster):
            roster.append(candidate)
        elif attempts > 500 * cfg.n_singers:
            raise ConfigurationError(
                "could not sample a separated singer roster; lower n_singers or raise max_profile_cos"
            )
    return roster


def _melody(rng: np.random.Generator, n_notes: int, cfg: CorpusConfig) -> list[int]:
    """Random-walk note tokens on the scale grid; token 0 is a rest."""
    n_degrees = len(SCALE_DEGREES)
    tokens: list[int] = []
    degree = int(rng.integers(0, n_degrees))
    for i in range(n_notes):
        if i > 0 and rng.random() < cfg.rest_prob:
            tokens.append(REST_TOKEN)
            continue
        degree = int(np.clip(degree + rng.integers(-2, 3), 0, n_degrees - 1))
        tokens.append(degree + 1)
    if all(t == REST_TOKEN for t in tokens):
        tokens[0] = 1
    return tokens


def tokens_to_f0(tokens: list[int], tonic_hz: float, frames_per_note: int) -> np.ndarray:
    """Frame-level Hz track for a token sequence (rests map to 0 Hz)."""
    track = np.zeros(len(tokens) * frames_per_note)
    for i, tok in enumerate(tokens):
        if tok != REST_TOKEN:
            freq = tonic_hz * 2.0 ** (SCALE_DEGREES[tok - 1] / 12.0)
            track[i * frames_per_note : (i + 1) * frames_per_note] = freq
    return track


def _build_manifest(song_id: str, rng: np.random.Generator, cfg: CorpusConfig) -> SongManifest:
    roster = _sample_roster(rng, cfg)
    k = cfg.n_singers
    tonic = float(rng.uniform(156.0, 178.0))
    min_notes = int(np.ceil(cfg.min_segment_s / cfg.note_len_s))
    max_notes = int(np.floor(cfg.max_segment_s / cfg.note_len_s))

    def new_segment(label: str, active: set[int], t0: float) -> Segment:
        n_notes = int(rng.integers(min_notes, max_notes + 1))
        tokens = _melody(rng, n_notes, cfg)
        f0 = tokens_to_f0(tokens, tonic, cfg.frames_per_note)
        dur = n_notes * cfg.note_len_s
        return Segment(t0, t0 + dur, label, tokens, f0, active)

    segments: list[Segment] = []
    t = 0.0
    for singer in rng.permutation(k):
        seg = new_segment("verse", {int(singer)}, t)
        segments.append(seg)
        t = seg.end
        if rng.random() < cfg.bridge_prob:
            seg = new_segment("bridge", {int(rng.integers(0, k))}, t)
            segments.append(seg)
            t = seg.end
        if k > 1:
            size = k if k == 2 or rng.random() < 0.5 else int(rng.integers(2, k + 1))
            active = set(int(s) for s in rng.choice(k, size=size, replace=False))
        else:
            active = {0}
        seg = new_segment("chorus", active, t)
        segments.append(seg)
        t = seg.end

    manifest = SongManifest(song_id, cfg.sample_rate, cfg.frame_rate, segments, roster)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _ramp_envelope(voiced: np.ndarray, ramp: int) -> np.ndarray:
    """Linear attack/release envelope contained inside each voiced run."""
    env = voiced.astype(np.float64)
    if ramp <= 0:
        return env
    padded = np.concatenate([[0.0], env, [0.0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges > 0)
    ends = np.flatnonzero(edges < 0)
    up = np.linspace(0.0, 1.0, ramp + 1)[1:]
    for a, b in zip(starts, ends):
        n = b - a
        r = min(ramp, n // 2)
        if r > 0:
            env[a : a + r] = np.minimum(env[a : a + r], up[-r:] if r == ramp else np.linspace(0, 1, r + 1)[1:])
            env[b - r : b] = np.minimum(env[b - r : b], up[-r:][::-1] if r == ramp else np.linspace(0, 1, r + 1)[1:][::-1])
    return env


def _render_voice(
    profile: SingerProfile,
    f0_frames: np.ndarray,
    sample_rate: int,
    hop: int,
    detune_cents: float,
) -> np.ndarray:
    f_lo, f_hi = profile.register_range
    voiced_f0 = f0_frames[f0_frames > 0]
    if voiced_f0.size and (voiced_f0.min() < f_lo or voiced_f0.max() > f_hi):
        raise ValidationError(
            f"f0 track [{voiced_f0.min():.1f}, {voiced_f0.max():.1f}] exceeds register "
            f"[{f_lo:.1f}, {f_hi:.1f}] of singer {profile.id}"
        )
    f0 = np.repeat(f0_frames, hop)
    n = f0.size
    t = np.arange(n) / sample_rate
    bend = profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_rate * t) + detune_cents
    f_inst = f0 * 2.0 ** (bend / 1200.0)
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate
    env = _ramp_envelope(f0 > 0, int(RAMP_S * sample_rate))

    voice = np.zeros(n)
    nyquist_guard = 0.45 * sample_rate
    for h, amp in enumerate(profile.harmonic_profile, start=1):
        if amp < 1e-3:
            continue
        audible = f_inst * h < nyquist_guard
        voice += amp * np.sin(h * phase) * audible
    return VOICE_GAIN * env * voice


def _reverb_tail(
    dry: np.ndarray, rng: np.random.Generator, decay_s: float, mix: float, sample_rate: int
) -> np.ndarray:
    ir_len = max(int(decay_s * sample_rate), 8)
    t = np.arange(ir_len) / sample_rate
    ir = rng.standard_normal(ir_len) * np.exp(-6.91 * t / decay_s)
    ir /= np.sqrt(np.sum(ir**2))
    wet = fftconvolve(dry, ir)[: dry.size]
    return dry + mix * wet


def render_song(
    manifest: SongManifest,
    rng_seed: int,
    detune_cents: float | None = None,
    reverb_mix: float | None = None,
    reverb_decay_range: tuple[float, float] = (0.2, 0.6),
) -> RenderedSong:
    """Render every voice additively; multi-singer segments get detune + reverb."""
    manifest.validate()
    sr = manifest.sample_rate
    hop = sr // manifest.frame_rate
    detune_cents = 15.0 if detune_cents is None else detune_cents
    reverb_mix = 0.35 if reverb_mix is None else reverb_mix
    roster = {p.id: p for p in manifest.singer_roster}

    waveform = np.zeros(int(np.ceil(manifest.duration * sr - 1e-6)))
    for seg_idx, seg in enumerate(manifest.segments):
        seg_rng = np.random.default_rng(np.random.SeedSequence([rng_seed, seg_idx]))
        multi = len(seg.active_singers) >= 2
        dry = np.zeros(len(seg.f0_track) * hop)
        for singer_id in sorted(seg.active_singers):
            detune = float(seg_rng.uniform(-detune_cents, detune_cents)) if multi else 0.0
            dry += _render_voice(roster[singer_id], seg.f0_track, sr, hop, detune)
        if multi and reverb_mix > 0:
            decay = float(seg_rng.uniform(*reverb_decay_range))
            dry = _reverb_tail(dry, seg_rng, decay, reverb_mix, sr)
        a = int(round(seg.start * sr))
        waveform[a : a + dry.size] = dry

    return RenderedSong(waveform, manifest, manifest.gt_f0())


def loudness_normalize(waveform: np.ndarray, target_rms: float = 0.1) -> np.ndarray:
    """Scale to the target RMS. All-zero input has no defined loudness."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise DegenerateSignalError("cannot normalize an empty waveform")
    rms = float(np.sqrt(np.mean(waveform**2)))
    if rms == 0.0:
        raise DegenerateSignalError("cannot normalize an all-zero waveform")
    return waveform * (target_rms / rms)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def song_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 1]).generate_state(1)[0])


def make_song(seed: int, index: int, cfg: CorpusConfig) -> RenderedSong:
    """Pure function of (seed, index, config); songs are independent."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 0]))
    manifest = _build_manifest(f"song{index:04d}", rng, cfg)
    song = render_song(
        manifest,
        song_seed(seed, index),
        detune_cents=cfg.detune_cents,
        reverb_mix=cfg.reverb_mix,
        reverb_decay_range=(cfg.reverb_decay_min_s, cfg.reverb_decay_max_s),
    )
    song.waveform = loudness_normalize(song.waveform, cfg.target_rms)
    return song


def make_corpus(seed: int, n_songs: int, cfg: CorpusConfig) -> list[RenderedSong]:
    if n_songs < 1:
        raise ConfigurationError("n_songs must be >= 1")
    cfg.validate()
    return [make_song(seed, i, cfg) for i in range(n_songs)]


# ---------------------------------------------------------------------------
# Singer embeddings (stand-in for a pretrained voice-print network)
# ---------------------------------------------------------------------------


def embed_segment(waveform_slice: np.ndarray, cfg: CorpusConfig) -> np.ndarray:
    """Unit-norm identity embedding: time-averaged normalized harmonic amplitudes.

    Per analysis frame, the fundamental is located by autocorrelation and the
    magnitude spectrum is sampled at its harmonics; the per-frame harmonic
    vectors are normalized, averaged over voiced frames, upsampled to d_emb,
    and renormalized.
    """
    x = np.asarray(waveform_slice, dtype=np.float64)
    min_len = int(cfg.min_slice_s * cfg.sample_rate)
    if x.size < min_len:
        raise InsufficientAudioError(
            f"slice of {x.size / cfg.sample_rate:.2f}s is below the {cfg.min_slice_s}s minimum"
        )
    rms = float(np.sqrt(np.mean(x**2)))
    if rms == 0.0:
        raise DegenerateSignalError("cannot embed an all-zero slice")

    win = EMBED_N_FFT
    hop = win // 2
    n_frames = max(1, (x.size - win) // hop + 1)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[np.minimum(idx, x.size - 1)]
    frame_rms = np.sqrt(np.mean(frames**2, axis=1))
    energetic = frame_rms >= 0.05 * rms

    sr = cfg.sample_rate
    lag_min, lag_max = int(sr / 700.0), int(sr / 70.0)
    peak_lag, r, peak_val = periodicity_pick(frames, sr, lag_min, lag_max)
    # Sub-sample refinement; an integer-lag F0 misplaces high harmonics.
    f0 = sr / parabolic_lag(r, peak_lag, lag_min, lag_max)
    usable = energetic & (peak_val >= 0.3)
    if not np.any(usable):
        raise DegenerateSignalError("no voiced frames in slice")

    window = np.hanning(win)
    spectra = np.abs(np.fft.rfft(frames[usable] * window, n=win, axis=1))
    bin_hz = sr / win
    n_use = spectra.shape[0]
    harmonics = np.zeros((n_use, EMBED_N_HARMONICS))
    # Harmonics 2..17: the fundamental anchors the comb but carries no
    # identity (all voices have one by construction).
    for h in range(2, EMBED_N_HARMONICS + 2):
        freq = h * f0[usable]
        center = np.round(freq / bin_hz).astype(int)
        valid = freq < 0.48 * sr
        # Vibrato widens harmonics proportionally to h; widen the search too.
        half_width = 2 + np.ceil(0.015 * freq / bin_hz).astype(int)
        for off in range(-int(half_width.max()), int(half_width.max()) + 1):
            cols = np.clip(center + off, 0, spectra.shape[1] - 1)
            inside = np.abs(off) <= half_width
            harmonics[:, h - 2] = np.maximum(
                harmonics[:, h - 2], spectra[np.arange(n_use), cols] * valid * inside
            )
    norms = np.linalg.norm(harmonics, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    mean_profile = (harmonics / norms).mean(axis=0)

    reps = cfg.d_emb // EMBED_N_HARMONICS
    v = np.repeat(mean_profile, reps)
    if v.size < cfg.d_emb:
        v = np.concatenate([v, np.zeros(cfg.d_emb - v.size)])
    return v / np.linalg.norm(v)


def slice_spans(duration: float, slice_len: float, overlap: float) -> list[tuple[float, float]]:
    """Overlapped slicing grid used for all embedding extraction."""
    hop = slice_len - overlap
    spans = []
    t = 0.0
    while t + slice_len <= duration + 1e-9:
        spans.append((t, t + slice_len))
        t += hop
    if not spans:
        spans.append((0.0, duration))
    return spans


def segment_slice_embeddings(song: RenderedSong, seg: Segment, cfg: CorpusConfig) -> list[np.ndarray]:
    sr = song.manifest.sample_rate
    samples = song.segment_samples(seg)
    utter_rms = float(np.sqrt(np.mean(song.waveform**2)))
    out = []
    for a, b in slice_spans(seg.duration, cfg.slice_len_s, cfg.slice_overlap_s):
        chunk = samples[int(a * sr) : int(b * sr)]
        if chunk.size < int(cfg.min_slice_s * sr):
            continue
        if float(np.sqrt(np.mean(chunk**2))) < 0.05 * utter_rms:
            continue
        out.append(embed_segment(chunk, cfg))
    return out


def segment_embedding(song: RenderedSong, seg: Segment, cfg: CorpusConfig) -> np.ndarray:
    """Representative embedding of one segment: renormalized mean over slices."""
    slices = segment_slice_embeddings(song, seg, cfg)
    if not slices:
        raise DegenerateSignalError(f"segment at {seg.start:.2f}s has no usable slices")
    mean = np.mean(slices, axis=0)
    return mean / np.linalg.norm(mean)


# ---------------------------------------------------------------------------
# Disk layout: index.json + per-song manifest/audio/f0 files
# ---------------------------------------------------------------------------


def manifest_to_dict(manifest: SongManifest) -> dict:
    return {
        "song_id": manifest.song_id,
        "sample_rate": manifest.sample_rate,
        "frame_rate": manifest.frame_rate,
        "segments": [
            {
                "start": seg.start,
                "end": seg.end,
                "label": seg.label,
                "lyric_tokens": list(seg.lyric_tokens),
                "f0_track": [float(v) for v in seg.f0_track],
                "active_singers": sorted(seg.active_singers),
            }
            for seg in manifest.segments
        ],
        "singer_roster": [
            {
                "id": p.id,
                "harmonic_profile": [float(v) for v in p.harmonic_profile],
                "register_range": [p.register_range[0], p.register_range[1]],
                "vibrato_rate": p.vibrato_rate,
                "vibrato_depth": p.vibrato_depth,
            }
            for p in manifest.singer_roster
        ],
    }


def manifest_from_dict(data: dict) -> SongManifest:
    segments = [
        Segment(
            start=s["start"],
            end=s["end"],
            label=s["label"],
            lyric_tokens=list(s["lyric_tokens"]),
            f0_track=np.asarray(s["f0_track"], dtype=np.float64),
            active_singers=set(s["active_singers"]),
        )
        for s in data["segments"]
    ]
    roster = [
        SingerProfile(
            id=p["id"],
            harmonic_profile=np.asarray(p["harmonic_profile"], dtype=np.float64),
            register_range=(p["register_range"][0], p["register_range"][1]),
            vibrato_rate=p["vibrato_rate"],
            vibrato_depth=p["vibrato_depth"],
        )
        for p in data["singer_roster"]
    ]
    return SongManifest(data["song_id"], data["sample_rate"], data["frame_rate"], segments, roster)


def save_corpus(songs: list[RenderedSong], out_dir: str | Path, cfg: CorpusConfig, seed: int) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "songs").mkdir(parents=True, exist_ok=True)
    index = {
        "version": 1,
        "seed": seed,
        "config": _corpus_cfg_dict(cfg),
        "songs": [],
    }
    for i, song in enumerate(songs):
        sid = song.manifest.song_id
        song_dir = out_dir / "songs" / sid
        song_dir.mkdir(parents=True, exist_ok=True)
        with open(song_dir / "manifest.json", "w") as fh:
            json.dump(manifest_to_dict(song.manifest), fh, sort_keys=True)
        wavfile.write(song_dir / "audio.wav", song.manifest.sample_rate, song.waveform.astype(np.float32))
        lines = ["frame_index,f0_hz"]
        lines += [f"{j},{v!r}" for j, v in enumerate(song.gt_f0)]
        (song_dir / "f0.csv").write_text("\n".join(lines) + "\n")
        index["songs"].append({"song_id": sid, "render_seed": song_seed(seed, i)})
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, sort_keys=True)
    return out_dir


def _corpus_cfg_dict(cfg: CorpusConfig) -> dict:
    import dataclasses

    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def load_corpus(corpus_dir: str | Path) -> list[RenderedSong]:
    corpus_dir = Path(corpus_dir)
    index_path = corpus_dir / "index.json"
    if not index_path.exists():
        raise ValidationError(f"no corpus index at {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    songs = []
    for entry in index["songs"]:
        song_dir = corpus_dir / "songs" / entry["song_id"]
        with open(song_dir / "manifest.json") as fh:
            manifest = manifest_from_dict(json.load(fh))
        _, wav = wavfile.read(song_dir / "audio.wav")
        gt = np.loadtxt(song_dir / "f0.csv", delimiter=",", skiprows=1, usecols=1, ndmin=1)
        songs.append(RenderedSong(wav.astype(np.float64), manifest, gt))
    return songs


def corpus_index_hash(corpus_dir: str | Path) -> str:
    import hashlib

    data = (Path(corpus_dir) / "index.json").read_bytes()
    return hashlib.sha256(data).hexdigest()
