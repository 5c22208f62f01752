"""Conditional flow matching over codec latents.

A small transformer velocity net learns v(z_t, t, c) where the target is
z1 - z0 along the linear path z_t = (1-t) z0 + t z1. Training timesteps are
logit-normal; sampling is plain Euler on [0, 1] with classifier-free
guidance obtained by zeroing the condition block. The singer-prompt fuser
is part of the model and trains jointly with the backbone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn
from scipy.special import expit

from .codec import TrainTrace, VocalCodec, waveform_to_frames
from .conditioning import SongAnnotation
from .config import CorpusConfig, FlowConfig
from .corpus import RenderedSong
from .errors import (
    AlignmentError,
    SamplingFailureError,
    TrainingFailureError,
    ValidationError,
)
from .prompt import SingerPromptFuser

T_CLIP = 1e-12


# ---------------------------------------------------------------------------
# Timestep distribution
# ---------------------------------------------------------------------------


def sample_timesteps(n: int, m: float, s: float, rng: np.random.Generator) -> np.ndarray:
    """t = logistic(u), u ~ N(m, s); strictly inside (0, 1)."""
    if s <= 0:
        raise ValidationError("timestep scale s must be > 0")
    u = rng.normal(m, s, size=n)
    return np.clip(expit(u), T_CLIP, 1.0 - 1e-12)


def sample_timestep(m: float, s: float, rng: np.random.Generator) -> float:
    return float(sample_timesteps(1, m, s, rng)[0])


def logit_normal_pdf(t, m: float, s: float):
    """Density of logistic(N(m, s)) evaluated at t in (0, 1)."""
    if s <= 0:
        raise ValidationError("logit_normal_pdf requires s > 0")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0) or np.any(t_arr >= 1):
        raise ValidationError("logit_normal_pdf is defined on the open interval (0, 1)")
    logit = np.log(t_arr / (1.0 - t_arr))
    dens = (
        1.0 / (s * math.sqrt(2.0 * math.pi))
        * 1.0 / (t_arr * (1.0 - t_arr))
        * np.exp(-((logit - m) ** 2) / (2.0 * s**2))
    )
    return dens if dens.shape else float(dens)


def interpolate(z0, z1, t):
    """Linear path z_t = (1 - t) z0 + t z1; endpoints are exact."""
    if torch.is_tensor(z0):
        if z0.shape != z1.shape:
            raise ValidationError(f"interpolate shape mismatch: {z0.shape} vs {z1.shape}")
        tt = t if torch.is_tensor(t) else torch.as_tensor(t, dtype=z0.dtype)
        while tt.ndim < z0.ndim:
            tt = tt.unsqueeze(-1)
        return (1.0 - tt) * z0 + tt * z1
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValidationError(f"interpolate shape mismatch: {z0.shape} vs {z1.shape}")
    return (1.0 - t) * z0 + t * z1


def cfg_velocity(v_cond, v_uncond, scale: float):
    """Classifier-free guidance: extrapolate from the unconditional velocity."""
    return v_uncond + scale * (v_cond - v_uncond)


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------


@dataclass
class ConditionBundle:
    """Embedded, frame-aligned condition tracks for one batch of windows.

    Tracks are at the feature frame rate and get aligned to the latent rate
    inside align_and_concat. `texture` is a pooled texture vector per sample
    (or None, which conditions on an all-zero texture block).
    """

    lyrics_track: torch.Tensor          # (B, T_feat, d_lyr)
    structure_track: torch.Tensor       # (B, T_feat, d_struct)
    prompt_track: torch.Tensor          # (B, T_feat, d_prompt)
    texture: torch.Tensor | None        # (B, d_z) or None
    start_time: torch.Tensor            # (B,) seconds
    t: float | None = None

    @property
    def batch(self) -> int:
        return self.lyrics_track.shape[0]

    def without_texture(self) -> "ConditionBundle":
        return replace(self, texture=None)


def _align(track: torch.Tensor, t_lat: int) -> torch.Tensor:
    """Mean-pool a (B, T, d) track onto t_lat frames (broadcast if T == 1)."""
    t = track.shape[1]
    if t == t_lat:
        return track
    if t == 1:
        return track.expand(track.shape[0], t_lat, track.shape[2])
    if t < t_lat:
        raise AlignmentError(f"track with {t} frames is shorter than the latent length {t_lat}")
    factor = int(math.ceil(t / t_lat))
    if t > factor * t_lat:
        raise AlignmentError(
            f"track with {t} frames exceeds {t_lat} latent frames by more than one window"
        )
    if t <= (factor - 1) * t_lat:
        raise AlignmentError(f"track with {t} frames is not within one window of {t_lat}x{factor}")
    if t < factor * t_lat:
        pad = track[:, -1:, :].expand(track.shape[0], factor * t_lat - t, track.shape[2])
        track = torch.cat([track, pad], dim=1)
    return track.reshape(track.shape[0], t_lat, factor, -1).mean(dim=2)


def align_and_concat(bundle: ConditionBundle, z_t: torch.Tensor, d_texture: int) -> torch.Tensor:
    """Model input: [z_t | lyrics | structure | prompt | texture] per frame."""
    squeeze = z_t.ndim == 2
    if squeeze:
        z_t = z_t.unsqueeze(0)
    b, t_lat, _ = z_t.shape
    lyr = _align(bundle.lyrics_track, t_lat)
    struct = _align(bundle.structure_track, t_lat)
    prompt = _align(bundle.prompt_track, t_lat)
    if bundle.texture is None:
        texture = z_t.new_zeros(b, t_lat, d_texture)
    else:
        texture = bundle.texture[:, None, :].expand(b, t_lat, d_texture)
    x = torch.cat([z_t, lyr, struct, prompt, texture], dim=-1)
    return x.squeeze(0) if squeeze else x


# ---------------------------------------------------------------------------
# Velocity network
# ---------------------------------------------------------------------------


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half) / half)
        self.register_buffer("freqs", freqs)
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        args = x[..., None].to(self.freqs.dtype) * self.freqs
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if emb.shape[-1] < self.dim:
            emb = torch.nn.functional.pad(emb, (0, self.dim - emb.shape[-1]))
        return emb


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, t, self.n_heads, self.d_head)
        q = q.reshape(shape).transpose(1, 2)
        k = k.reshape(shape).transpose(1, 2)
        v = v.reshape(shape).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VelocityNet(nn.Module):
    def __init__(self, d_in: int, d_z: int, cfg: FlowConfig):
        super().__init__()
        d = cfg.d_model
        self.input = nn.Linear(d_in, d)
        self.pos = SinusoidalEmbedding(d)
        self.t_embed = nn.Sequential(SinusoidalEmbedding(d), nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.start_embed = nn.Sequential(SinusoidalEmbedding(d), nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, d_z)

    def forward(self, x: torch.Tensor, t: torch.Tensor, start_time: torch.Tensor) -> torch.Tensor:
        b, t_lat, _ = x.shape
        h = self.input(x)
        pos = self.pos(torch.arange(t_lat, dtype=x.dtype))
        h = h + pos[None]
        h = h + self.t_embed(1000.0 * t.to(x.dtype))[:, None, :]
        h = h + self.start_embed(50.0 * start_time.to(x.dtype))[:, None, :]
        for block in self.blocks:
            h = block(h)
        return self.out(self.norm(h))


class FlowModel(nn.Module):
    """Velocity net plus the learned condition embedders (tables + fuser)."""

    def __init__(self, cfg: FlowConfig, d_z: int, vocab_size: int, d_emb: int, n_labels: int = 4):
        super().__init__()
        self.cfg = cfg
        self.d_z = d_z
        self.d_in = d_z + cfg.d_lyr + cfg.d_struct + cfg.d_prompt + d_z
        self.lyric_table = nn.Embedding(vocab_size, cfg.d_lyr)
        self.structure_table = nn.Embedding(n_labels, cfg.d_struct)
        self.fuser = SingerPromptFuser(d_emb, cfg.d_prompt, cfg.fuser_heads)
        self.net = VelocityNet(self.d_in, d_z, cfg)

    def velocity(
        self,
        z_t: torch.Tensor,
        t: float | torch.Tensor,
        bundle: ConditionBundle,
        cond: bool | torch.Tensor = True,
    ) -> torch.Tensor:
        """v(z_t, t, c); cond False (or a per-sample bool mask) zeroes the
        condition block, which is the unconditional CFG branch."""
        x = align_and_concat(bundle, z_t, self.d_z)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        b = x.shape[0]
        if isinstance(cond, bool):
            keep = torch.full((b,), cond, dtype=torch.bool)
        else:
            keep = cond.bool()
        if not keep.all():
            x = x.clone()
            x[~keep, :, self.d_z :] = 0.0
        tt = t if torch.is_tensor(t) else torch.full((b,), float(t))
        v = self.net(x, tt, bundle.start_time)
        return v.squeeze(0) if z_t.ndim == 2 else v

    def build_bundle(
        self,
        token_ids: torch.Tensor,          # (B, T_feat) int
        structure_ids: torch.Tensor,      # (B, T_feat) int
        segment_ids: torch.Tensor,        # (B, T_feat) int, local segment index
        singer_sets: list[list[np.ndarray]],
        texture: torch.Tensor | None,
        start_time: torch.Tensor,
    ) -> ConditionBundle:
        """Embed raw tracks; the prompt track goes through the fuser (with
        gradients, so the fuser trains jointly)."""
        lyr = self.lyric_table(token_ids.long())
        struct = self.structure_table(structure_ids.long())
        b, t_feat = token_ids.shape
        prompt = lyr.new_zeros(b, t_feat, self.cfg.d_prompt)
        for bi in range(b):
            for si, singers in enumerate(singer_sets[bi]):
                mask = segment_ids[bi] == si
                if not bool(mask.any()):
                    continue
                u = torch.as_tensor(np.atleast_2d(singers), dtype=lyr.dtype)
                prompt[bi, mask] = self.fuser(u)
        return ConditionBundle(lyr, struct, prompt, texture, start_time)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def flow_matching_terms(
    z1: torch.Tensor, m: float, s: float, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Draw (z_t, t, target): z0 from the standard normal prior, t
    logit-normal, target = z1 - z0."""
    b = z1.shape[0]
    t = torch.as_tensor(sample_timesteps(b, m, s, rng), dtype=z1.dtype)
    z0 = torch.as_tensor(rng.standard_normal(tuple(z1.shape)), dtype=z1.dtype)
    z_t = interpolate(z0, z1, t)
    return z_t, t, z1 - z0


def fm_loss(
    model,
    z1: torch.Tensor,
    bundle: ConditionBundle,
    rng: np.random.Generator,
    m: float = 0.0,
    s: float = 1.0,
    cond_drop_prob: float = 0.0,
) -> torch.Tensor:
    """Mean squared velocity error with optional condition dropout."""
    z_t, t, target = flow_matching_terms(z1, m, s, rng)
    if cond_drop_prob > 0:
        keep = torch.as_tensor(rng.random(z1.shape[0]) >= cond_drop_prob)
    else:
        keep = True
    v = model.velocity(z_t, t, bundle, cond=keep)
    loss = torch.mean((v - target) ** 2)
    if not torch.isfinite(loss):
        raise TrainingFailureError("flow-matching loss became non-finite")
    return loss


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def euler_sample(
    model,
    bundle: ConditionBundle,
    n_steps: int,
    cfg_scale: float,
    rng: np.random.Generator,
    n_frames: int,
    d_z: int | None = None,
    return_trajectory: bool = False,
):
    """Integrate dz/dt = v from a prior draw at t=0 to t=1 in uniform steps."""
    if n_steps < 1:
        raise ValidationError("euler_sample requires n_steps >= 1")
    d_z = d_z if d_z is not None else model.d_z
    b = bundle.batch
    model_dtype = bundle.start_time.dtype
    # State is integrated in float64 so that constant velocity fields come
    # out exact after the final cast, for any step count.
    z = torch.as_tensor(rng.standard_normal((b, n_frames, d_z)), dtype=torch.float64)
    grid = np.linspace(0.0, 1.0, n_steps + 1)
    trajectory = [z.to(model_dtype)]
    with torch.no_grad():
        for i in range(n_steps):
            t = float(grid[i])
            z_in = z.to(model_dtype)
            if cfg_scale == 1.0:
                v = model.velocity(z_in, t, bundle, cond=True)
            elif cfg_scale == 0.0:
                v = model.velocity(z_in, t, bundle, cond=False)
            else:
                v_c = model.velocity(z_in, t, bundle, cond=True)
                v_u = model.velocity(z_in, t, bundle, cond=False)
                v = cfg_velocity(v_c, v_u, cfg_scale)
            z = z + float(grid[i + 1] - grid[i]) * v.to(torch.float64)
            if not torch.isfinite(z).all():
                raise SamplingFailureError(f"non-finite state after Euler step {i}", step=i)
            if return_trajectory:
                trajectory.append(z.to(model_dtype))
    z = z.to(model_dtype)
    return (z, trajectory) if return_trajectory else z


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class FlowTrainData:
    """Per-song tensors the flow trainer samples windows from."""

    z1: torch.Tensor                    # (T_lat, d_z) stage-1 encoder means
    texture_mu: torch.Tensor            # (T_lat, d_z) stage-2 encoder means
    token_track: np.ndarray
    structure_track: np.ndarray
    segment_track: np.ndarray
    singer_sets: list[np.ndarray]


def prepare_flow_data(
    songs: list[RenderedSong],
    annotations: list[SongAnnotation],
    codec_vae: VocalCodec,
    codec_texture: VocalCodec,
    corpus_cfg: CorpusConfig,
) -> list[FlowTrainData]:
    if codec_texture.stage != "texture":
        raise ValidationError("flow training needs the texture-stage codec for Z_texture")
    out = []
    with torch.no_grad():
        for song, ann in zip(songs, annotations):
            frames = waveform_to_frames(song.waveform, corpus_cfg.hop, codec_vae.compression)
            z1, _ = codec_vae.encode(frames)
            tex_mu, _ = codec_texture.encode(frames)
            out.append(
                FlowTrainData(
                    z1=z1,
                    texture_mu=tex_mu,
                    token_track=ann.token_track,
                    structure_track=ann.structure_track,
                    segment_track=ann.segment_track,
                    singer_sets=ann.singer_sets(),
                )
            )
    return out


def _window_batch(
    data: list[FlowTrainData],
    rng: np.random.Generator,
    window: int,
    compression: int,
    frame_rate: int,
):
    """Sample one training window: aligned latent crop + raw condition crops."""
    d = data[int(rng.integers(0, len(data)))]
    t_feat_full = min(len(d.token_track), d.z1.shape[0] * compression)
    max_start = max(0, (t_feat_full - window) // compression)
    start = int(rng.integers(0, max_start + 1)) * compression
    stop = min(start + window, t_feat_full)
    lat_a, lat_b = start // compression, stop // compression
    seg_raw = d.segment_track[start:stop]
    local_ids, seg_local = np.unique(seg_raw, return_inverse=True)
    return {
        "z1": d.z1[lat_a:lat_b],
        "texture": d.texture_mu[lat_a:lat_b].mean(dim=0),
        "tokens": d.token_track[start:stop],
        "structure": d.structure_track[start:stop],
        "segments": seg_local,
        "singer_sets": [d.singer_sets[i] for i in local_ids],
        "start_time": start / frame_rate,
    }


def train_flow(
    songs: list[RenderedSong],
    annotations: list[SongAnnotation],
    codec_vae: VocalCodec,
    codec_texture: VocalCodec,
    cfg: FlowConfig,
    corpus_cfg: CorpusConfig,
    max_steps: int | None = None,
    log_every: int = 25,
) -> tuple[FlowModel, TrainTrace]:
    """Joint optimization of the velocity net, embedders, and fuser."""
    if not songs:
        raise ValidationError("train_flow requires a nonempty corpus")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model = FlowModel(cfg, codec_vae.cfg.d_z, corpus_cfg.vocab_size, corpus_cfg.d_emb)
    data = prepare_flow_data(songs, annotations, codec_vae, codec_texture, corpus_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))

    steps = cfg.steps if max_steps is None else max_steps
    trace = TrainTrace()
    last_state = None
    compression = codec_vae.compression
    for step in range(steps):
        views = [
            _window_batch(data, rng, cfg.window_frames, compression, corpus_cfg.frame_rate)
            for _ in range(cfg.batch_size)
        ]
        z1 = torch.stack([v["z1"] for v in views])
        texture = torch.stack([v["texture"] for v in views])
        bundle = model.build_bundle(
            torch.as_tensor(np.stack([v["tokens"] for v in views])),
            torch.as_tensor(np.stack([v["structure"] for v in views])),
            torch.as_tensor(np.stack([v["segments"] for v in views])),
            [v["singer_sets"] for v in views],
            texture,
            torch.as_tensor([v["start_time"] for v in views], dtype=torch.float32),
        )
        try:
            loss = fm_loss(model, z1, bundle, rng, cfg.m, cfg.s, cfg.cond_drop_prob)
        except TrainingFailureError as err:
            raise TrainingFailureError(str(err), last_state, step) from err
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            trace.append(step, float(loss.detach()), {})
            last_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return model, trace
