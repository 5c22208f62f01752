"""Desk-scale vocal VAE and the condition-guided texture-learning stage.

Audio is represented to the codec as non-overlapping waveform patches (one
patch per feature frame), so encoder/decoder are small 1-D conv stacks over
frame features with 4x temporal compression. Stage 1 trains plain
reconstruction; stage 2 perturbs the latent at a fixed SNR and hands the
decoder the explicit conditions (lyrics, singer prompt, F0), which pushes
pitch/content/identity out of the latent and leaves vocal texture in it.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import CodecConfig, CorpusConfig
from .conditioning import SongAnnotation, downsample_track, f0_condition
from .corpus import RenderedSong
from .errors import (
    AlignmentError,
    DegenerateSignalError,
    TrainingFailureError,
    ValidationError,
)

STFT_EPS = 1e-7


# ---------------------------------------------------------------------------
# Waveform <-> frame-feature layout
# ---------------------------------------------------------------------------


def waveform_to_frames(waveform: np.ndarray, hop: int, compression: int) -> torch.Tensor:
    """(T, hop) float32 patches, zero-padded so T divides the compression."""
    x = np.asarray(waveform, dtype=np.float32)
    block = hop * compression
    n = int(math.ceil(x.size / block)) * block
    if n != x.size:
        x = np.concatenate([x, np.zeros(n - x.size, dtype=np.float32)])
    return torch.from_numpy(x.reshape(-1, hop))


def frames_to_waveform(frames: torch.Tensor) -> torch.Tensor:
    return frames.reshape(*frames.shape[:-2], -1)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class Encoder(nn.Module):
    def __init__(self, hop: int, hidden: int, d_z: int, compression: int):
        super().__init__()
        if compression != 4:
            raise ValidationError("encoder implements 4x temporal compression")
        self.net = nn.Sequential(
            nn.Conv1d(hop, hidden, kernel_size=5, padding=2),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
        )
        self.head = nn.Conv1d(hidden, 2 * d_z, kernel_size=3, padding=1)
        self.d_z = d_z

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # frames: (..., T, hop) -> latent (.., T/4, d_z) twice
        x = frames.transpose(-1, -2)
        h = self.head(self.net(x))
        mu, logvar = h[..., : self.d_z, :], h[..., self.d_z :, :]
        return mu.transpose(-1, -2), logvar.transpose(-1, -2)


class Decoder(nn.Module):
    def __init__(self, hop: int, hidden: int, d_in: int, compression: int):
        super().__init__()
        if compression != 4:
            raise ValidationError("decoder implements 4x temporal upsampling")
        self.net = nn.Sequential(
            nn.Conv1d(d_in, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.ConvTranspose1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose1d(hidden, hidden, kernel_size=4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(hidden, hop, kernel_size=5, padding=2),
        )

    def forward(self, z_and_cond: torch.Tensor) -> torch.Tensor:
        return self.net(z_and_cond.transpose(-1, -2)).transpose(-1, -2)


@dataclass
class ExplicitConditions:
    """Frame-aligned explicit condition tracks at the latent frame rate."""

    c_lyrics: torch.Tensor             # (T_lat, d_lyr)
    c_singer: torch.Tensor             # (T_lat, d_prompt)
    c_f0: torch.Tensor                 # (T_lat, 2)

    def concat(self) -> torch.Tensor:
        n = {t.shape[-2] for t in (self.c_lyrics, self.c_singer, self.c_f0)}
        if len(n) != 1:
            raise AlignmentError(f"explicit condition tracks disagree on frame count: {n}")
        return torch.cat([self.c_lyrics, self.c_singer, self.c_f0], dim=-1)


class VocalCodec(nn.Module):
    """Encoder/decoder pair plus the codec-private condition embedders."""

    def __init__(self, cfg: CodecConfig, corpus_cfg: CorpusConfig):
        super().__init__()
        self.cfg = cfg
        self.hop = corpus_cfg.hop
        self.compression = cfg.compression
        self.encoder = Encoder(self.hop, cfg.hidden, cfg.d_z, cfg.compression)
        self.decoder = Decoder(self.hop, cfg.hidden, cfg.d_z + cfg.cond_width, cfg.compression)
        self.lyric_table = nn.Embedding(corpus_cfg.vocab_size, cfg.d_lyr)
        self.stage = "init"

    # -- core ops ----------------------------------------------------------

    def encode(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if frames.shape[-2] < 1:
            raise ValidationError("encode requires at least one frame")
        if not torch.isfinite(frames).all():
            raise ValidationError("encode input contains NaN or Inf")
        return self.encoder(frames)

    def decode_cond(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-1] != self.cfg.cond_width:
            raise AlignmentError(
                f"condition width {cond.shape[-1]} != configured {self.cfg.cond_width}"
            )
        if cond.shape[-2] != z.shape[-2]:
            raise AlignmentError(
                f"latent has {z.shape[-2]} frames but conditions have {cond.shape[-2]}"
            )
        return self.decoder(torch.cat([z, cond], dim=-1))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        zeros = z.new_zeros(*z.shape[:-1], self.cfg.cond_width)
        return self.decode_cond(z, zeros)

    # -- condition assembly --------------------------------------------------

    def build_conditions(
        self,
        token_track: torch.Tensor,      # (T_feat,) int ids
        prompt_track: torch.Tensor,     # (T_feat, d_prompt)
        f0_track: np.ndarray,           # (T_feat,) Hz
    ) -> ExplicitConditions:
        t_lat = token_track.shape[0] // self.compression
        lyr = self.lyric_table(token_track.long())
        lyr = _downsample_torch(lyr, t_lat)
        singer = _downsample_torch(prompt_track, t_lat)
        f0 = torch.as_tensor(
            downsample_track(f0_condition(f0_track), t_lat), dtype=lyr.dtype
        )
        return ExplicitConditions(lyr, singer, f0)


def _downsample_torch(track: torch.Tensor, target: int) -> torch.Tensor:
    length = track.shape[0]
    if length == target:
        return track
    factor = length // target
    if factor * target != length:
        raise AlignmentError(f"cannot downsample {length} frames to {target}")
    return track.reshape(target, factor, -1).mean(dim=1)


# ---------------------------------------------------------------------------
# Sampling, perturbation, losses
# ---------------------------------------------------------------------------


def reparameterize(
    mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None
) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


def perturb_latent(
    z: torch.Tensor, snr_db: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Additive Gaussian noise with one variance per sequence.

    sigma^2 = P_z / 10^(snr_db / 10) with P_z the mean squared latent value,
    so the realized SNR matches the target exactly in expectation.
    """
    if not torch.is_tensor(z):
        z = torch.as_tensor(z)
    power = float(torch.mean(z.detach().double() ** 2))
    if power == 0.0:
        raise DegenerateSignalError("perturb_latent: SNR is undefined for an all-zero latent")
    if math.isinf(snr_db):
        return z.clone()
    if not math.isfinite(snr_db):
        raise ValidationError("snr_db must be finite or +inf")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return z + sigma * noise


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL to the standard normal: 0.5(mu^2 + s^2 - log s^2 - 1)."""
    return 0.5 * torch.mean(mu**2 + torch.exp(logvar) - logvar - 1.0)


def stft_loss(
    y: torch.Tensor, y_hat: torch.Tensor, windows: tuple[int, ...] = (256, 512, 1024)
) -> torch.Tensor:
    """Multi-resolution spectral convergence + log-magnitude L1."""
    if y.shape != y_hat.shape:
        raise ValidationError(f"stft_loss length mismatch: {y.shape} vs {y_hat.shape}")
    y = y.reshape(-1, y.shape[-1])
    y_hat = y_hat.reshape(-1, y_hat.shape[-1])
    total = y.new_zeros(())
    for win in windows:
        window = torch.hann_window(win, dtype=y.dtype)
        s_y = torch.stft(y, win, hop_length=win // 2, window=window, return_complex=True).abs()
        s_p = torch.stft(y_hat, win, hop_length=win // 2, window=window, return_complex=True).abs()
        sc = torch.linalg.norm(s_y - s_p) / torch.linalg.norm(s_y).clamp_min(STFT_EPS)
        log_mag = torch.mean(torch.abs(torch.log(s_y + STFT_EPS) - torch.log(s_p + STFT_EPS)))
        total = total + sc + log_mag
    return total / len(windows)


def vae_loss(
    y: torch.Tensor,
    y_hat: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    w_stft: float = 1.0,
    w_kl: float = 1e-4,
    w_adv: float = 0.0,
    adv_logits: torch.Tensor | None = None,
    windows: tuple[int, ...] = (256, 512, 1024),
) -> tuple[torch.Tensor, dict]:
    l_stft = stft_loss(y, y_hat, windows)
    l_kl = kl_divergence(mu, logvar)
    total = w_stft * l_stft + w_kl * l_kl
    parts = {"stft": float(l_stft.detach()), "kl": float(l_kl.detach()), "adv": 0.0}
    if adv_logits is not None and w_adv > 0:
        l_adv = torch.mean((adv_logits - 1.0) ** 2)  # least-squares generator term
        total = total + w_adv * l_adv
        parts["adv"] = float(l_adv.detach())
    return total, parts


class PatchCritic(nn.Module):
    """Tiny least-squares critic over frame patches; optional, off by default."""

    def __init__(self, hop: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(hop, hidden, kernel_size=5, stride=2, padding=2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, hidden, kernel_size=5, stride=2, padding=2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, 1, kernel_size=3, padding=1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames.transpose(-1, -2))


# ---------------------------------------------------------------------------
# Texture extraction
# ---------------------------------------------------------------------------


@dataclass
class TextureLatent:
    """Texture sequence plus its pooled summary (frame mean)."""

    sequence: np.ndarray               # (T_lat, d_z)
    pooled: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pooled = np.asarray(self.sequence, dtype=np.float64).mean(axis=0)


def extract_texture(reference_frames: torch.Tensor, codec: VocalCodec) -> TextureLatent:
    """Encoder mean of a reference (no sampling); requires the texture stage."""
    if codec.stage != "texture":
        raise ValidationError(
            f"texture extraction needs texture-stage parameters, got stage={codec.stage!r}"
        )
    with torch.no_grad():
        mu, _ = codec.encode(reference_frames)
    return TextureLatent(sequence=mu.numpy().astype(np.float64))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    stft: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)

    def append(self, step: int, total: float, parts: dict) -> None:
        self.steps.append(step)
        self.total.append(total)
        self.stft.append(parts.get("stft", 0.0))
        self.kl.append(parts.get("kl", 0.0))
        self.adv.append(parts.get("adv", 0.0))

    def to_csv(self) -> str:
        lines = ["step,total,stft,kl,adv"]
        for i, s in enumerate(self.steps):
            lines.append(f"{s},{self.total[i]!r},{self.stft[i]!r},{self.kl[i]!r},{self.adv[i]!r}")
        return "\n".join(lines) + "\n"


def _song_frame_cache(songs: list[RenderedSong], hop: int, compression: int) -> list[torch.Tensor]:
    return [waveform_to_frames(s.waveform, hop, compression) for s in songs]


def _sample_crop(
    rng: np.random.Generator, frames: torch.Tensor, window: int, compression: int
) -> tuple[int, torch.Tensor]:
    t = frames.shape[0]
    if t <= window:
        return 0, frames
    max_start = (t - window) // compression
    start = int(rng.integers(0, max_start + 1)) * compression
    return start, frames[start : start + window]


def train_vae(
    songs: list[RenderedSong],
    cfg: CodecConfig,
    corpus_cfg: CorpusConfig,
    max_steps: int | None = None,
    log_every: int = 10,
) -> tuple[VocalCodec, TrainTrace]:
    """Stage 1: plain reconstruction with STFT + KL objectives."""
    if not songs:
        raise ValidationError("train_vae requires a nonempty corpus")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    codec = VocalCodec(cfg, corpus_cfg)
    critic = PatchCritic(corpus_cfg.hop) if cfg.adversarial else None
    params = list(codec.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.adam_betas))
    opt_critic = (
        torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
        if critic
        else None
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    cache = _song_frame_cache(songs, corpus_cfg.hop, cfg.compression)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    steps = cfg.steps_vae if max_steps is None else max_steps
    trace = TrainTrace()
    last_state = None
    for step in range(steps):
        batch = []
        for _ in range(cfg.batch_size):
            song_idx = int(rng.integers(0, len(cache)))
            _, crop = _sample_crop(rng, cache[song_idx], cfg.window_frames, cfg.compression)
            batch.append(crop)
        frames = torch.stack(batch)
        mu, logvar = codec.encode(frames)
        z = reparameterize(mu, logvar, gen)
        recon = codec.decode(z)
        y = frames_to_waveform(frames)
        y_hat = frames_to_waveform(recon)

        adv_logits = critic(recon) if critic else None
        loss, parts = vae_loss(
            y, y_hat, mu, logvar,
            w_stft=cfg.w_stft, w_kl=cfg.beta_kl, w_adv=cfg.w_adv,
            adv_logits=adv_logits, windows=tuple(cfg.stft_windows),
        )
        if not torch.isfinite(loss):
            raise TrainingFailureError("stage-1 loss became non-finite", last_state, step)
        opt.zero_grad()
        loss.backward()
        opt.step()

        if critic:
            real_logits = critic(frames)
            fake_logits = critic(recon.detach())
            critic_loss = torch.mean((real_logits - 1.0) ** 2) + torch.mean(fake_logits**2)
            opt_critic.zero_grad()
            critic_loss.backward()
            opt_critic.step()

        if step % log_every == 0 or step == steps - 1:
            trace.append(step, float(loss.detach()), parts)
            last_state = {k: v.detach().clone() for k, v in codec.state_dict().items()}
    codec.stage = "vae"
    return codec, trace


def train_texture_stage(
    codec: VocalCodec,
    songs: list[RenderedSong],
    annotations: list[SongAnnotation],
    prompt_tracks: list[np.ndarray],
    cfg: CodecConfig,
    corpus_cfg: CorpusConfig,
    max_steps: int | None = None,
    log_every: int = 10,
) -> tuple[VocalCodec, TrainTrace]:
    """Stage 2: latent perturbation at fixed SNR + condition-guided decoding."""
    if codec.stage not in ("vae", "texture"):
        raise ValidationError("texture stage requires stage-1 (vae) parameters")
    if not songs:
        raise ValidationError("train_texture_stage requires a nonempty corpus")
    if not (len(songs) == len(annotations) == len(prompt_tracks)):
        raise ValidationError("songs, annotations, and prompt tracks must align")
    torch.set_num_threads(1)
    codec = copy.deepcopy(codec)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    cache = _song_frame_cache(songs, corpus_cfg.hop, cfg.compression)
    prompts = [torch.as_tensor(p, dtype=torch.float32) for p in prompt_tracks]

    steps = cfg.steps_texture if max_steps is None else max_steps
    trace = TrainTrace()
    last_state = None
    for step in range(steps):
        frames_b, cond_b = [], []
        for _ in range(cfg.batch_size):
            song_idx = int(rng.integers(0, len(cache)))
            ann = annotations[song_idx]
            usable = cache[song_idx][: (ann.n_frames // cfg.compression) * cfg.compression]
            start, crop = _sample_crop(rng, usable, cfg.window_frames, cfg.compression)
            stop = start + crop.shape[0]
            cond = codec.build_conditions(
                torch.as_tensor(ann.token_track[start:stop]),
                prompts[song_idx][start:stop],
                ann.f0_track[start:stop],
            )
            frames_b.append(crop)
            cond_b.append(cond.concat())
        frames = torch.stack(frames_b)
        cond = torch.stack(cond_b)

        mu, logvar = codec.encode(frames)
        z = reparameterize(mu, logvar, gen)
        z_tilde = perturb_latent(z, cfg.snr_db, gen)
        recon = codec.decode_cond(z_tilde, cond)
        loss, parts = vae_loss(
            frames_to_waveform(frames), frames_to_waveform(recon), mu, logvar,
            w_stft=cfg.w_stft, w_kl=cfg.beta_kl_texture, windows=tuple(cfg.stft_windows),
        )
        if not torch.isfinite(loss):
            raise TrainingFailureError("texture-stage loss became non-finite", last_state, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            trace.append(step, float(loss.detach()), parts)
            last_state = {k: v.detach().clone() for k, v in codec.state_dict().items()}
    codec.stage = "texture"
    return codec, trace
