"""High-level glue: annotation products, prompt tracks, and generation.

Everything here is a pure function of (trained models, inputs, seed) so the
CLI and the evaluation protocols share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import TextureLatent, VocalCodec, extract_texture, frames_to_waveform, waveform_to_frames
from .conditioning import SongAnnotation, annotate_song, token_frame_track
from .config import PipelineConfig
from .corpus import REST_TOKEN, RenderedSong, embed_segment
from .errors import ConfigurationError, ValidationError
from .flow import ConditionBundle, FlowModel, euler_sample
from .prompt import LABEL_IDS, SingerPromptFuser, fuse


def make_frozen_fuser(cfg: PipelineConfig) -> SingerPromptFuser:
    """Seeded-init fuser used to build the texture stage's singer prompts.

    The trainable fuser lives inside the flow model and is optimized with
    the flow objective; the texture stage runs earlier in the pipeline, so
    it conditions on this deterministic frozen instance instead.
    """
    torch.manual_seed(cfg.flow.seed)
    return SingerPromptFuser(cfg.corpus.d_emb, cfg.flow.d_prompt, cfg.flow.fuser_heads)


def prompt_track_for(annotation: SongAnnotation, fuser: SingerPromptFuser, d_prompt: int) -> np.ndarray:
    """Frame-level prompt track for one song through a given fuser."""
    out = np.zeros((annotation.n_frames, d_prompt))
    for i, singers in enumerate(annotation.singer_sets()):
        mask = annotation.segment_track == i
        if mask.any():
            out[mask] = fuse(singers, fuser)
    return out


def annotate_corpus(songs: list[RenderedSong], cfg: PipelineConfig) -> list[SongAnnotation]:
    return [annotate_song(s, cfg.corpus) for s in songs]


def split_corpus(songs: list, holdout_fraction: float = 0.25) -> tuple[list, list]:
    """Deterministic train/holdout split: the tail of the corpus is held out."""
    if not songs:
        raise ValidationError("cannot split an empty corpus")
    n_hold = max(1, int(round(len(songs) * holdout_fraction)))
    n_hold = min(n_hold, len(songs) - 1) if len(songs) > 1 else 0
    cut = len(songs) - n_hold
    return list(songs[:cut]), list(songs[cut:])


@dataclass
class TrainedModels:
    """The three checkpoints the generation/evaluation stages consume."""

    codec_vae: VocalCodec
    codec_texture: VocalCodec
    flow: FlowModel


def decode_latent(codec: VocalCodec, z: torch.Tensor) -> np.ndarray:
    """Latent sequence -> waveform through the stage-1 decoder."""
    with torch.no_grad():
        frames = codec.decode(z)
    wav = frames_to_waveform(frames)
    return wav.reshape(-1).numpy().astype(np.float64)


def texture_from_waveform(
    models: TrainedModels, waveform: np.ndarray, hop: int
) -> TextureLatent:
    frames = waveform_to_frames(waveform, hop, models.codec_texture.compression)
    return extract_texture(frames, models.codec_texture)


@dataclass
class GenerationSpec:
    """Raw condition tracks for one generation window."""

    token_track: np.ndarray             # (T_feat,) ids
    structure_track: np.ndarray         # (T_feat,) label ids
    segment_track: np.ndarray           # (T_feat,) local segment index
    singer_sets: list[np.ndarray]       # per local segment (n, d_emb)
    start_time: float = 0.0
    texture: TextureLatent | None = None

    @property
    def n_frames(self) -> int:
        return len(self.token_track)


def build_generation_bundle(model: FlowModel, spec: GenerationSpec) -> ConditionBundle:
    texture = None
    if spec.texture is not None:
        texture = torch.as_tensor(spec.texture.pooled, dtype=torch.float32)[None, :]
    return model.build_bundle(
        torch.as_tensor(spec.token_track)[None],
        torch.as_tensor(spec.structure_track)[None],
        torch.as_tensor(spec.segment_track)[None],
        [spec.singer_sets],
        texture,
        torch.as_tensor([spec.start_time], dtype=torch.float32),
    )


def generate(
    models: TrainedModels,
    spec: GenerationSpec,
    n_steps: int,
    cfg_scale: float,
    seed: int,
) -> tuple[torch.Tensor, np.ndarray]:
    """Sample one latent sequence for the spec and decode it to audio."""
    if spec.n_frames % models.codec_vae.compression != 0:
        raise ValidationError("generation length must align with the codec compression")
    bundle = build_generation_bundle(models.flow, spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    t_lat = spec.n_frames // models.codec_vae.compression
    with torch.no_grad():
        z = euler_sample(models.flow, bundle, n_steps, cfg_scale, rng, n_frames=t_lat)
    waveform = decode_latent(models.codec_vae, z[0])
    return z[0], waveform


# ---------------------------------------------------------------------------
# Generation requests (the CLI's wire format)
# ---------------------------------------------------------------------------


def request_to_spec(
    request: dict,
    models: TrainedModels,
    cfg: PipelineConfig,
) -> tuple[GenerationSpec, dict]:
    """Materialize a request file into condition tracks.

    Request schema:
      roster:   [{id, embedding: [floats]} or {id, audio: path, start?, end?}]
      segments: [{label, lyric_tokens: [ints], singers: [roster ids]}]
      texture_reference: optional path to a WAV file
      seed / n_steps / cfg_scale: optional overrides
    """
    from scipy.io import wavfile

    if "segments" not in request or not request["segments"]:
        raise ConfigurationError("generation request needs a nonempty 'segments' list")
    roster: dict[int, np.ndarray] = {}
    for entry in request.get("roster", []):
        if "embedding" in entry:
            v = np.asarray(entry["embedding"], dtype=np.float64)
            v = v / np.linalg.norm(v)
        elif "audio" in entry:
            sr, wav = wavfile.read(entry["audio"])
            wav = np.asarray(wav, dtype=np.float64)
            a = int(entry.get("start", 0.0) * sr)
            b = int(entry.get("end", len(wav) / sr) * sr)
            v = embed_segment(wav[a:b], cfg.corpus)
        else:
            raise ConfigurationError("roster entries need an 'embedding' or 'audio' source")
        roster[int(entry["id"])] = v

    fpn = cfg.corpus.frames_per_note
    tokens, structure, seg_track, singer_sets = [], [], [], []
    for si, seg in enumerate(request["segments"]):
        toks = [int(t) for t in seg["lyric_tokens"]]
        if not toks:
            raise ConfigurationError(f"segment {si} has no lyric tokens")
        if any(t < 0 or t >= cfg.corpus.vocab_size for t in toks):
            raise ConfigurationError(f"segment {si} has tokens outside the vocabulary")
        ids = [int(x) for x in seg.get("singers", [])]
        if not ids:
            raise ConfigurationError(f"segment {si} names no singers")
        missing = [i for i in ids if i not in roster]
        if missing:
            raise ConfigurationError(f"segment {si} references unknown roster ids {missing}")
        label = seg.get("label", "verse")
        if label not in LABEL_IDS:
            raise ConfigurationError(f"segment {si} has unknown label {label!r}")
        if len(ids) >= 2 and label in ("chorus", "bridge"):
            label = "multi_chorus"
        n_frames = len(toks) * fpn
        tokens.append(token_frame_track(toks, n_frames, fpn))
        structure.append(np.full(n_frames, LABEL_IDS[label], dtype=np.int64))
        seg_track.append(np.full(n_frames, si, dtype=np.int64))
        singer_sets.append(np.stack([roster[i] for i in ids]))

    texture = None
    if request.get("texture_reference"):
        sr, wav = wavfile.read(request["texture_reference"])
        texture = texture_from_waveform(models, np.asarray(wav, dtype=np.float64), cfg.corpus.hop)

    spec = GenerationSpec(
        token_track=np.concatenate(tokens),
        structure_track=np.concatenate(structure),
        segment_track=np.concatenate(seg_track),
        singer_sets=singer_sets,
        texture=texture,
    )
    options = {
        "seed": int(request.get("seed", cfg.eval.seed)),
        "n_steps": int(request.get("n_steps", cfg.inference.n_steps)),
        "cfg_scale": float(request.get("cfg_scale", cfg.inference.cfg_scale)),
    }
    return spec, options


def default_request_tokens(rng: np.random.Generator, n_notes: int, vocab_hi: int = 8) -> list[int]:
    """Small helper for smoke requests: a walk over the note tokens."""
    degree = int(rng.integers(1, vocab_hi + 1))
    out = []
    for _ in range(n_notes):
        degree = int(np.clip(degree + rng.integers(-2, 3), 1, vocab_hi))
        out.append(degree)
    if out:
        out[min(3, len(out) - 1)] = REST_TOKEN
    return out
