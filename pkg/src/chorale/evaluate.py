"""Evaluation protocols: F0 metrics, texture-swap non-leakage, similarity
distributions, fuser attention reports, and time-frequency plots.

All protocol runners are pure functions of (models, corpus, seed) and their
reports serialize to JSON with a schema version, so repeated runs with the
same seed are bit-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import SongAnnotation
from .config import CorpusConfig, EvalConfig, InferenceConfig
from .corpus import RenderedSong, segment_slice_embeddings, slice_spans
from .errors import InsufficientOverlapError, ProtocolError, ValidationError
from .pitch import cents_array, f0_estimate
from .pipeline import GenerationSpec, TrainedModels, generate
from .prompt import SingerPromptFuser, attention_weights

SCHEMA_VERSION = 1

# Row names follow the production reporting convention for the
# texture-swap table; WER and SIM resolve through the metric plugin
# registry and stay null unless an implementation is registered.
TABLE_ROWS = ("F0 RMSE (cents)", "F0 MAE (cents)", "Correlation", "WER", "SIM")

# Full-scale reference statistics recorded for context in reports. These
# describe the production system and are not desk-scale targets.
FULLSCALE_TEXTURE_REFERENCE = {"F0 RMSE (cents)": 7.85, "F0 MAE (cents)": 6.21, "Correlation": 0.9997}
FULLSCALE_SIMILARITY_REFERENCE = {
    "intra": {"mean": 0.5355, "median": 0.5526, "std": 0.1973},
    "cross": {"mean": 0.2835, "median": 0.2778, "std": 0.1515},
}

METRIC_REGISTRY: dict[str, object] = {}


def register_metric(name: str):
    """Register an external metric (e.g. WER, SIM) for protocol reports.

    The callable receives the protocol context dict and returns a float.
    No implementation is bundled; these metrics require pretrained
    recognition models that are out of scope here.
    """

    def wrap(fn):
        METRIC_REGISTRY[name] = fn
        return fn

    return wrap


def _optional_metric(name: str, context: dict) -> float | None:
    fn = METRIC_REGISTRY.get(name)
    return float(fn(context)) if fn else None


# ---------------------------------------------------------------------------
# F0 comparison
# ---------------------------------------------------------------------------


@dataclass
class F0Report:
    rmse_cents: float
    mae_cents: float
    correlation: float
    n_frames_compared: int

    def __post_init__(self):
        if self.rmse_cents + 1e-9 < self.mae_cents or self.mae_cents < 0:
            raise ValidationError("F0Report requires rmse >= mae >= 0")

    def to_dict(self) -> dict:
        return {
            "rmse_cents": self.rmse_cents,
            "mae_cents": self.mae_cents,
            "correlation": self.correlation,
            "n_frames_compared": self.n_frames_compared,
        }


def compare_f0(track_a: np.ndarray, track_b: np.ndarray) -> F0Report:
    """Cents-domain RMSE/MAE and log-F0 correlation over mutually voiced frames."""
    a = np.asarray(track_a, dtype=np.float64)
    b = np.asarray(track_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"compare_f0 needs equal frame counts, got {a.shape} vs {b.shape}")
    voiced = (a > 0) & (b > 0)
    if not np.any(voiced):
        raise InsufficientOverlapError("no mutually voiced frames to compare")
    dev = cents_array(a[voiced], b[voiced])
    rmse = float(np.sqrt(np.mean(dev**2)))
    mae = float(np.mean(np.abs(dev)))
    la, lb = np.log2(a[voiced]), np.log2(b[voiced])
    if np.std(la) < 1e-12 or np.std(lb) < 1e-12:
        # Degenerate contours: perfectly parallel counts as corr 1.
        corr = 1.0 if float(np.ptp(dev)) < 1e-9 else 0.0
    else:
        corr = float(np.corrcoef(la, lb)[0, 1])
    return F0Report(rmse, mae, corr, int(voiced.sum()))


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Székely energy distance between two samples of vectors."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    from scipy.spatial.distance import cdist, pdist

    d_xy = cdist(x, y).mean()
    d_xx = pdist(x).mean() if len(x) > 1 else 0.0
    d_yy = pdist(y).mean() if len(y) > 1 else 0.0
    return float(2.0 * d_xy - d_xx - d_yy)


# ---------------------------------------------------------------------------
# Texture-swap protocol
# ---------------------------------------------------------------------------


@dataclass
class TextureSwapReport:
    seed: int
    n_samples: int
    n_references: int
    per_reference: list[dict]
    aggregate: dict
    table: dict
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "n_references": self.n_references,
            "per_reference": self.per_reference,
            "aggregate": self.aggregate,
            "table": self.table,
            "fullscale_reference": FULLSCALE_TEXTURE_REFERENCE,
        }


def _solo_windows(
    songs: list[RenderedSong],
    annotations: list[SongAnnotation],
    window: int,
    rng: np.random.Generator,
    n_samples: int,
    compression: int,
) -> list[GenerationSpec]:
    candidates = []
    for song, ann in zip(songs, annotations):
        fr = song.manifest.frame_rate
        for si, seg in enumerate(song.manifest.segments):
            if seg.label != "verse":
                continue
            a = int(round(seg.start * fr))
            b = a + len(seg.f0_track)
            if b - a >= window:
                candidates.append((song, ann, si, a, b))
    if not candidates:
        raise ProtocolError("no verse segment is long enough for a generation window")
    specs = []
    for i in range(n_samples):
        song, ann, si, a, b = candidates[int(rng.integers(0, len(candidates)))]
        off = a + int(rng.integers(0, (b - a - window) // compression + 1)) * compression
        specs.append(
            GenerationSpec(
                token_track=ann.token_track[off : off + window],
                structure_track=ann.structure_track[off : off + window],
                segment_track=np.zeros(window, dtype=np.int64),
                singer_sets=[ann.singer_sets()[si]],
                start_time=off / song.manifest.frame_rate,
            )
        )
    return specs


def _reference_textures(
    models: TrainedModels,
    songs: list[RenderedSong],
    rng: np.random.Generator,
    n_references: int,
    hop: int,
) -> list[dict]:
    """Reference clips spanning solo and multi-singer segments."""
    from .pipeline import texture_from_waveform

    solo, multi = [], []
    for song in songs:
        for seg in song.manifest.segments:
            entry = (song, seg)
            (multi if len(seg.active_singers) >= 2 else solo).append(entry)
    refs = []
    for r in range(n_references):
        pool = solo if (r % 2 == 0 and solo) or not multi else multi
        song, seg = pool[int(rng.integers(0, len(pool)))]
        samples = song.segment_samples(seg)
        refs.append(
            {
                "reference_id": r,
                "song_id": song.manifest.song_id,
                "segment_start": seg.start,
                "kind": "multi" if len(seg.active_singers) >= 2 else "solo",
                "texture": texture_from_waveform(models, samples, hop),
            }
        )
    return refs


def texture_swap_protocol(
    models: TrainedModels,
    songs: list[RenderedSong],
    annotations: list[SongAnnotation],
    corpus_cfg: CorpusConfig,
    eval_cfg: EvalConfig,
    inference_cfg: InferenceConfig,
    n_samples: int | None = None,
    n_references: int | None = None,
    seed: int | None = None,
) -> TextureSwapReport:
    """Texture non-leakage check: per sample, generate once without texture
    and once per reference with identical seed/conditions, then compare the
    F0 contours of the decoded generations over the solo windows."""
    n_samples = eval_cfg.n_samples if n_samples is None else n_samples
    n_references = eval_cfg.n_references if n_references is None else n_references
    seed = eval_cfg.seed if seed is None else seed
    if n_samples < 1:
        raise ProtocolError("texture_swap_protocol requires n_samples >= 1")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    window = models.flow.cfg.window_frames
    comp = models.codec_vae.compression
    specs = _solo_windows(songs, annotations, window, rng, n_samples, comp)
    references = _reference_textures(models, songs, rng, n_references, corpus_cfg.hop)

    sr = corpus_cfg.sample_rate
    fr = corpus_cfg.frame_rate
    per_pair: dict[int, list[F0Report]] = {r["reference_id"]: [] for r in references}
    for i, spec in enumerate(specs):
        sample_seed = int(np.random.SeedSequence([seed, 202, i]).generate_state(1)[0])
        _, base_wav = generate(models, spec, inference_cfg.n_steps, inference_cfg.cfg_scale, sample_seed)
        base_f0 = f0_estimate(base_wav, fr, sr)
        for ref in references:
            spec_tex = GenerationSpec(
                token_track=spec.token_track,
                structure_track=spec.structure_track,
                segment_track=spec.segment_track,
                singer_sets=spec.singer_sets,
                start_time=spec.start_time,
                texture=ref["texture"],
            )
            _, tex_wav = generate(
                models, spec_tex, inference_cfg.n_steps, inference_cfg.cfg_scale, sample_seed
            )
            tex_f0 = f0_estimate(tex_wav, fr, sr)
            per_pair[ref["reference_id"]].append(compare_f0(base_f0, tex_f0))

    per_reference = []
    for ref in references:
        reports = per_pair[ref["reference_id"]]
        per_reference.append(
            {
                "reference_id": ref["reference_id"],
                "song_id": ref["song_id"],
                "kind": ref["kind"],
                "f0_rmse_cents": float(np.mean([r.rmse_cents for r in reports])),
                "f0_mae_cents": float(np.mean([r.mae_cents for r in reports])),
                "correlation": float(np.mean([r.correlation for r in reports])),
                "n_comparisons": len(reports),
            }
        )
    if per_reference:
        aggregate = {
            "f0_rmse_cents": float(np.mean([r["f0_rmse_cents"] for r in per_reference])),
            "f0_mae_cents": float(np.mean([r["f0_mae_cents"] for r in per_reference])),
            "correlation": float(np.mean([r["correlation"] for r in per_reference])),
            "n_comparisons": int(sum(r["n_comparisons"] for r in per_reference)),
        }
    else:
        aggregate = {"f0_rmse_cents": None, "f0_mae_cents": None, "correlation": None, "n_comparisons": 0}

    context = {"models": models, "songs": songs, "seed": seed}
    table = {
        "F0 RMSE (cents)": aggregate["f0_rmse_cents"],
        "F0 MAE (cents)": aggregate["f0_mae_cents"],
        "Correlation": aggregate["correlation"],
        "WER": _optional_metric("WER", context),
        "SIM": _optional_metric("SIM", context),
    }
    return TextureSwapReport(seed, n_samples, n_references, per_reference, aggregate, table)


# ---------------------------------------------------------------------------
# Similarity distributions
# ---------------------------------------------------------------------------


@dataclass
class SimilarityReport:
    intra_mean: float
    intra_median: float
    intra_std: float
    cross_mean: float
    cross_median: float
    cross_std: float
    n_intra_pairs: int
    n_cross_pairs: int
    histogram: dict
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "intra": {"mean": self.intra_mean, "median": self.intra_median, "std": self.intra_std},
            "cross": {"mean": self.cross_mean, "median": self.cross_median, "std": self.cross_std},
            "n_intra_pairs": self.n_intra_pairs,
            "n_cross_pairs": self.n_cross_pairs,
            "histogram": self.histogram,
            "metadata": self.metadata,
        }


def similarity_distributions(
    songs: list[RenderedSong],
    cfg: CorpusConfig,
    slice_len_s: float | None = None,
    overlap_s: float | None = None,
    max_cross_pairs: int = 20000,
    seed: int = 42,
    histogram_bins: int = 40,
) -> SimilarityReport:
    """Intra-verse vs cross-song similarity populations.

    Intra pairs compare overlapped slices within one verse section; cross
    pairs compare slices of verses from different songs (distinct singer
    profiles by construction).
    """
    slice_len = cfg.slice_len_s if slice_len_s is None else slice_len_s
    overlap = cfg.slice_overlap_s if overlap_s is None else overlap_s
    n_profiles = sum(len(s.manifest.singer_roster) for s in songs)
    if len(songs) < 2 or n_profiles < 2:
        raise ProtocolError("similarity protocol needs >= 2 songs with >= 2 singer profiles")

    work_cfg = CorpusConfig(**{**cfg.__dict__, "slice_len_s": slice_len, "slice_overlap_s": overlap})
    per_verse: list[tuple[int, list[np.ndarray]]] = []
    for si, song in enumerate(songs):
        for seg in song.manifest.segments:
            if seg.label != "verse":
                continue
            slices = segment_slice_embeddings(song, seg, work_cfg)
            if slices:
                per_verse.append((si, slices))

    intra = []
    for _, slices in per_verse:
        for i in range(len(slices)):
            for j in range(i + 1, len(slices)):
                intra.append(float(slices[i] @ slices[j]))

    flat = [(si, e) for si, slices in per_verse for e in slices]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    cross = []
    attempts = 0
    while len(cross) < max_cross_pairs and attempts < 20 * max_cross_pairs:
        attempts += 1
        i, j = rng.integers(0, len(flat), size=2)
        if flat[i][0] == flat[j][0]:
            continue
        cross.append(float(flat[i][1] @ flat[j][1]))
    if not intra or not cross:
        raise ProtocolError("not enough slice pairs for similarity statistics")

    edges = np.linspace(-1.0, 1.0, histogram_bins + 1)
    hist = {
        "edges": [float(e) for e in edges],
        "intra_counts": [int(c) for c in np.histogram(intra, bins=edges)[0]],
        "cross_counts": [int(c) for c in np.histogram(cross, bins=edges)[0]],
    }
    intra_arr, cross_arr = np.array(intra), np.array(cross)
    return SimilarityReport(
        intra_mean=float(intra_arr.mean()),
        intra_median=float(np.median(intra_arr)),
        intra_std=float(intra_arr.std()),
        cross_mean=float(cross_arr.mean()),
        cross_median=float(np.median(cross_arr)),
        cross_std=float(cross_arr.std()),
        n_intra_pairs=len(intra),
        n_cross_pairs=len(cross),
        histogram=hist,
        metadata={
            "slice_len_s": slice_len,
            "overlap_s": overlap,
            "seed": seed,
            "fullscale_reference": FULLSCALE_SIMILARITY_REFERENCE,
        },
    )


def expected_intra_pairs(verse_durations: list[float], slice_len: float, overlap: float) -> int:
    """Closed-form intra pair count implied by the slicing parameters."""
    total = 0
    for dur in verse_durations:
        n = len(slice_spans(dur, slice_len, overlap))
        total += n * (n - 1) // 2
    return total


# ---------------------------------------------------------------------------
# Attention report
# ---------------------------------------------------------------------------


def attention_report(
    fuser: SingerPromptFuser,
    annotation: SongAnnotation,
    out_dir: str | Path | None = None,
) -> dict:
    """Per-segment head-summed singer weights plus, for multi-singer
    segments, the singer-to-singer cross-attention matrix."""
    k = annotation.global_set.k
    rows = []
    cross_matrices = {}
    for asg, singers in zip(annotation.assignments, annotation.singer_sets()):
        alpha = attention_weights(singers, fuser)           # (heads, n)
        head_sum = alpha.sum(axis=0)
        weights = np.zeros(k)
        for col, singer_idx in enumerate(asg.assigned_singers):
            weights[singer_idx] = head_sum[col]
        rows.append(
            {
                "segment_index": asg.segment_index,
                "label": asg.updated_label,
                "singer_weights": [float(w) for w in weights],
            }
        )
        if len(asg.assigned_singers) >= 2:
            with torch.no_grad():
                mat = fuser.cross_attention(
                    torch.as_tensor(np.atleast_2d(singers), dtype=torch.float32)
                ).numpy()
            cross_matrices[asg.segment_index] = mat

    report = {
        "schema_version": SCHEMA_VERSION,
        "song_id": annotation.song_id,
        "n_heads": fuser.n_heads,
        "segments": rows,
        "cross_attention": {
            str(i): [[float(v) for v in row] for row in m] for i, m in cross_matrices.items()
        },
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        weight_matrix = np.array([r["singer_weights"] for r in rows])
        _heatmap_png(
            weight_matrix.T,
            out_dir / f"{annotation.song_id}_singer_attention.png",
            xlabel="segment",
            ylabel="singer",
            title="Singer attention (head-summed)",
        )
        _matrix_csv(weight_matrix, out_dir / f"{annotation.song_id}_singer_attention.csv")
        for i, mat in cross_matrices.items():
            stem = f"{annotation.song_id}_seg{i}_cross_attention"
            _heatmap_png(mat, out_dir / f"{stem}.png", xlabel="key singer", ylabel="query singer",
                         title=f"Singer-to-singer attention (segment {i})")
            _matrix_csv(mat, out_dir / f"{stem}.csv")
        with open(out_dir / f"{annotation.song_id}_attention.json", "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
    return report


# ---------------------------------------------------------------------------
# Plots: pitch salience and mel spectrogram
# ---------------------------------------------------------------------------


def pitch_salience_map(
    waveform: np.ndarray,
    sample_rate: int,
    bins_per_octave: int = 36,
    fmin: float = 65.406,
    fmax: float = 1046.5,
    hop: int = 160,
    win: int = 1024,
) -> tuple[np.ndarray, np.ndarray]:
    """(salience matrix [n_bins, n_frames], bin frequencies).

    Salience is enhanced normalized autocorrelation over a log-pitch grid:
    the value at each pitch's lag, minus the value at half that lag, which
    suppresses octave-below ghosts. Frames below the energy gate are zero.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("pitch_salience_map requires a nonempty waveform")
    n_frames = max(1, int(np.ceil(x.size / hop)))
    pad = (n_frames - 1) * hop + win - x.size
    xp = np.pad(x, (0, max(0, pad)))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx]

    n_fft = int(2 ** np.ceil(np.log2(2 * win)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=n_fft, axis=1)[:, :win]
    r0 = acf[:, :1].copy()
    r0[r0 <= 0] = 1.0
    r = np.clip(acf / r0, 0.0, None)

    n_bins = int(np.floor(bins_per_octave * np.log2(fmax / fmin))) + 1
    freqs = fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    lags = sample_rate / freqs

    def r_at(lag_values: np.ndarray) -> np.ndarray:
        lo = np.floor(lag_values).astype(int)
        frac = lag_values - lo
        lo = np.clip(lo, 0, win - 2)
        return r[:, lo] * (1 - frac) + r[:, lo + 1] * frac

    sal = np.maximum(0.0, r_at(lags) - r_at(lags / 2.0)).T   # (n_bins, n_frames)

    utter_rms = np.sqrt(np.mean(x**2)) if x.size else 0.0
    frame_rms = np.sqrt(np.mean(frames**2, axis=1))
    gate = frame_rms >= 0.05 * utter_rms if utter_rms > 0 else np.zeros(n_frames, bool)
    sal[:, ~gate] = 0.0
    return sal, freqs


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    points = from_mel(np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2))
    bins = np.floor((n_fft + 1) * points / sample_rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        a, b, c = bins[i], bins[i + 1], bins[i + 2]
        if b > a:
            fb[i, a:b] = (np.arange(a, b) - a) / (b - a)
        if c > b:
            fb[i, b:c] = (c - np.arange(b, c)) / (c - b)
    return fb


def mel_spectrogram(
    waveform: np.ndarray,
    sample_rate: int,
    n_mels: int = 64,
    win: int = 512,
    hop: int = 160,
    fmin: float = 50.0,
    fmax: float | None = None,
) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("mel_spectrogram requires a nonempty waveform")
    fmax = 0.475 * sample_rate if fmax is None else fmax
    n_frames = max(1, int(np.ceil(x.size / hop)))
    pad = (n_frames - 1) * hop + win - x.size
    xp = np.pad(x, (0, max(0, pad)))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(n_mels, win, sample_rate, fmin, fmax)
    return np.log10(power @ fb.T + 1e-10).T                  # (n_mels, n_frames)


def _heatmap_png(matrix: np.ndarray, path: Path, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    im = ax.imshow(matrix, aspect="auto", origin="lower", interpolation="nearest")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _matrix_csv(matrix: np.ndarray, path: Path) -> None:
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt="%r")


def emit_pitch_salience(
    waveform: np.ndarray,
    sample_rate: int,
    out_png: str | Path,
    eval_cfg: EvalConfig | None = None,
) -> dict:
    cfg = eval_cfg or EvalConfig()
    sal, freqs = pitch_salience_map(
        waveform, sample_rate, cfg.salience_bins_per_octave, cfg.salience_fmin, cfg.salience_fmax
    )
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    _heatmap_png(sal, out_png, xlabel="frame", ylabel="pitch bin", title="Pitch salience")
    sidecar = out_png.with_suffix(".csv")
    _matrix_csv(sal, sidecar)
    return {"png": str(out_png), "csv": str(sidecar), "shape": list(sal.shape),
            "bin_freqs_hz": [float(f) for f in freqs]}


def emit_mel_spectrogram(
    waveform: np.ndarray,
    sample_rate: int,
    out_png: str | Path,
    eval_cfg: EvalConfig | None = None,
) -> dict:
    cfg = eval_cfg or EvalConfig()
    mel = mel_spectrogram(waveform, sample_rate, n_mels=cfg.mel_bands)
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    _heatmap_png(mel, out_png, xlabel="frame", ylabel="mel band", title="Mel spectrogram")
    sidecar = out_png.with_suffix(".csv")
    _matrix_csv(mel, sidecar)
    return {"png": str(out_png), "csv": str(sidecar), "shape": list(mel.shape)}


def salience_trajectory_counts(salience: np.ndarray, rel_threshold: float = 0.5) -> np.ndarray:
    """Per frame, the number of local salience maxima above rel_threshold of
    the frame max; the oracle for counting simultaneous pitch trajectories."""
    n_bins, n_frames = salience.shape
    counts = np.zeros(n_frames, dtype=int)
    for t in range(n_frames):
        col = salience[:, t]
        m = col.max()
        if m <= 0:
            continue
        thresh = rel_threshold * m
        above = col >= thresh
        # Count connected runs of suprathreshold bins as one trajectory each.
        counts[t] = int(np.sum(above[1:] & ~above[:-1]) + int(above[0]))
    return counts


def summary_table(report: TextureSwapReport) -> str:
    """Fixed-width text table with the production row names."""
    lines = [f"{'Metric':<22}{'Value':>12}"]
    for row in TABLE_ROWS:
        value = report.table.get(row)
        text = "n/a" if value is None else f"{value:.4f}"
        lines.append(f"{row:<22}{text:>12}")
    return "\n".join(lines)
