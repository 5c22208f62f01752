"""Checkpoint files and run manifests.

Every CLI command emits a RunManifest so each output artifact is traceable
to its command, config hash, seeds, and input hashes. Checkpoints embed the
config hash; downstream stages refuse checkpoints from a different config.
"""
from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .codec import VocalCodec
from .config import PipelineConfig
from .errors import ConfigurationError, MissingArtifactError
from .flow import FlowModel

CHECKPOINT_VERSION = 1


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def source_revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except Exception:
        pass
    return f"chorale-{__version__}"


def save_checkpoint(
    path: str | Path,
    kind: str,
    model: torch.nn.Module,
    cfg: PipelineConfig,
    stage: str | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "stage": stage,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def _read_checkpoint(path: str | Path, kind: str, cfg: PipelineConfig) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {kind} checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != kind:
        raise ConfigurationError(f"{path} is a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    if payload.get("config_hash") != cfg.hash():
        raise ConfigurationError(
            f"{path} was trained under a different config "
            f"({payload.get('config_hash', '?')[:12]} != {cfg.hash()[:12]})"
        )
    return payload


def load_codec(path: str | Path, cfg: PipelineConfig, kind: str = "codec_vae") -> VocalCodec:
    payload = _read_checkpoint(path, kind, cfg)
    codec = VocalCodec(cfg.codec, cfg.corpus)
    codec.load_state_dict(payload["state_dict"])
    codec.stage = payload["stage"]
    codec.eval()
    return codec


def load_flow(path: str | Path, cfg: PipelineConfig) -> FlowModel:
    payload = _read_checkpoint(path, "flow", cfg)
    model = FlowModel(cfg.flow, cfg.codec.d_z, cfg.corpus.vocab_size, cfg.corpus.d_emb)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


@dataclass
class RunManifest:
    command: str
    config_hash: str
    source_revision: str
    seeds: dict
    input_hashes: dict = field(default_factory=dict)
    output_paths: list = field(default_factory=list)
    wall_time_s: float = 0.0
    version: int = 1

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, sort_keys=True, indent=1)
        return path


class ManifestTimer:
    """Collects a command's inputs/outputs and writes its manifest."""

    def __init__(self, command: str, cfg: PipelineConfig, seeds: dict):
        self.manifest = RunManifest(
            command=command,
            config_hash=cfg.hash(),
            source_revision=source_revision(),
            seeds=seeds,
        )
        self._t0 = time.monotonic()

    def add_input(self, name: str, path: str | Path) -> None:
        self.manifest.input_hashes[name] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.manifest.output_paths.append(str(path))

    def write(self, path: str | Path) -> Path:
        self.manifest.wall_time_s = time.monotonic() - self._t0
        out = self.manifest.write(path)
        return out
