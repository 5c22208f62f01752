"""Command-line pipeline: synth-data, three training stages, generate, evaluate.

Stage ordering is enforced through checkpoint and corpus presence; every
command writes a RunManifest next to its outputs. Exit codes: 0 success,
2 configuration error, 3 missing upstream artifact, 4 training failure,
5 evaluation failure, 1 anything else.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import artifacts, codec as codec_mod, corpus as corpus_mod, flow as flow_mod
from . import evaluate as eval_mod
from . import pipeline as pipe
from .config import PipelineConfig, desk_config, load_config, save_config
from .errors import (
    EXIT_CONFIG,
    EXIT_EVALUATION,
    EXIT_FAILURE,
    EXIT_MISSING_ARTIFACT,
    EXIT_OK,
    EXIT_TRAINING,
    ChoraleError,
    ConfigurationError,
    EvaluationError,
    MissingArtifactError,
    SamplingFailureError,
    TrainingFailureError,
)


def _apply_seed_override(cfg: PipelineConfig, seed: int | None) -> dict:
    if seed is not None:
        cfg.corpus.seed = seed
        cfg.codec.seed = seed
        cfg.flow.seed = seed
        cfg.eval.seed = seed
    return {
        "corpus": cfg.corpus.seed,
        "codec": cfg.codec.seed,
        "flow": cfg.flow.seed,
        "eval": cfg.eval.seed,
    }


class Workspace:
    """Resolved paths and config for one command invocation."""

    def __init__(self, cfg: PipelineConfig, out: Path, seeds: dict):
        self.cfg = cfg
        self.out = out
        self.seeds = seeds
        p = cfg.paths
        self.corpus_dir = out / p.corpus_dir
        self.ckpt_dir = out / p.checkpoints_dir
        self.reports_dir = out / p.reports_dir
        self.generations_dir = out / p.generations_dir
        self.vae_ckpt = self.ckpt_dir / "vae.pt"
        self.texture_ckpt = self.ckpt_dir / "texture.pt"
        self.flow_ckpt = self.ckpt_dir / "flow.pt"

    def require(self, *paths: Path) -> None:
        for path in paths:
            if not path.exists():
                raise MissingArtifactError(f"required artifact is missing: {path}")

    def load_songs(self) -> list:
        self.require(self.corpus_dir / "index.json")
        return corpus_mod.load_corpus(self.corpus_dir)

    def split(self, songs: list) -> tuple[list, list]:
        return pipe.split_corpus(songs, self.cfg.eval.holdout_fraction)

    def timer(self, command: str) -> artifacts.ManifestTimer:
        return artifacts.ManifestTimer(command, self.cfg, self.seeds)


pass_workspace = click.make_pass_decorator(Workspace)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=False), default=None,
              help="Pipeline config YAML; defaults to the desk profile.")
@click.option("--seed", type=int, default=None, help="Override every stage seed.")
@click.option("--out", type=click.Path(), default="runs", show_default=True,
              help="Output directory for all artifacts.")
@click.pass_context
def cli(ctx, config_path, seed, out):
    """Desk-scale multi-singer vocal generation pipeline."""
    cfg = load_config(config_path) if config_path else desk_config()
    cfg.validate()
    seeds = _apply_seed_override(cfg, seed)
    ctx.obj = Workspace(cfg, Path(out), seeds)


@cli.command("synth-data")
@pass_workspace
def cmd_synth_data(ws: Workspace):
    """Generate the synthetic corpus with full ground truth."""
    timer = ws.timer("synth-data")
    cfg = ws.cfg
    songs = corpus_mod.make_corpus(cfg.corpus.seed, cfg.corpus.n_songs, cfg.corpus)
    corpus_mod.save_corpus(songs, ws.corpus_dir, cfg.corpus, cfg.corpus.seed)
    timer.add_output(ws.corpus_dir / "index.json")
    timer.write(ws.corpus_dir / "run_manifest.json")
    click.echo(f"wrote {len(songs)} songs to {ws.corpus_dir} "
               f"(index hash {corpus_mod.corpus_index_hash(ws.corpus_dir)[:12]})")


@cli.command("train-vae")
@click.option("--max-steps", type=int, default=None, help="Cap training steps (for CI).")
@pass_workspace
def cmd_train_vae(ws: Workspace, max_steps):
    """Stage 1: reconstruction VAE over the corpus."""
    timer = ws.timer("train-vae")
    songs = ws.load_songs()
    train_songs, _ = ws.split(songs)
    codec, trace = codec_mod.train_vae(train_songs, ws.cfg.codec, ws.cfg.corpus, max_steps=max_steps)
    timer.add_input("corpus_index", ws.corpus_dir / "index.json")
    artifacts.save_checkpoint(ws.vae_ckpt, "codec_vae", codec, ws.cfg, stage=codec.stage)
    (ws.ckpt_dir / "vae_loss.csv").write_text(trace.to_csv())
    timer.add_output(ws.vae_ckpt)
    timer.add_output(ws.ckpt_dir / "vae_loss.csv")
    timer.write(ws.ckpt_dir / "vae_run_manifest.json")
    click.echo(f"stage-1 codec -> {ws.vae_ckpt} (final loss {trace.total[-1]:.4f})")


@cli.command("train-texture")
@click.option("--max-steps", type=int, default=None, help="Cap training steps (for CI).")
@pass_workspace
def cmd_train_texture(ws: Workspace, max_steps):
    """Stage 2: condition-guided texture learning on top of the VAE."""
    timer = ws.timer("train-texture")
    songs = ws.load_songs()
    ws.require(ws.vae_ckpt)
    train_songs, _ = ws.split(songs)
    vae = artifacts.load_codec(ws.vae_ckpt, ws.cfg, "codec_vae")
    annotations = pipe.annotate_corpus(train_songs, ws.cfg)
    fuser = pipe.make_frozen_fuser(ws.cfg)
    tracks = [pipe.prompt_track_for(a, fuser, ws.cfg.flow.d_prompt) for a in annotations]
    codec, trace = codec_mod.train_texture_stage(
        vae, train_songs, annotations, tracks, ws.cfg.codec, ws.cfg.corpus, max_steps=max_steps
    )
    timer.add_input("corpus_index", ws.corpus_dir / "index.json")
    timer.add_input("vae_checkpoint", ws.vae_ckpt)
    artifacts.save_checkpoint(ws.texture_ckpt, "codec_texture", codec, ws.cfg, stage=codec.stage)
    (ws.ckpt_dir / "texture_loss.csv").write_text(trace.to_csv())
    timer.add_output(ws.texture_ckpt)
    timer.add_output(ws.ckpt_dir / "texture_loss.csv")
    timer.write(ws.ckpt_dir / "texture_run_manifest.json")
    click.echo(f"texture codec -> {ws.texture_ckpt} (final loss {trace.total[-1]:.4f})")


@cli.command("train-flow")
@click.option("--max-steps", type=int, default=None, help="Cap training steps (for CI).")
@pass_workspace
def cmd_train_flow(ws: Workspace, max_steps):
    """Stage 3: conditional flow matching over the codec latents."""
    timer = ws.timer("train-flow")
    songs = ws.load_songs()
    ws.require(ws.vae_ckpt, ws.texture_ckpt)
    train_songs, _ = ws.split(songs)
    vae = artifacts.load_codec(ws.vae_ckpt, ws.cfg, "codec_vae")
    texture = artifacts.load_codec(ws.texture_ckpt, ws.cfg, "codec_texture")
    annotations = pipe.annotate_corpus(train_songs, ws.cfg)
    model, trace = flow_mod.train_flow(
        train_songs, annotations, vae, texture, ws.cfg.flow, ws.cfg.corpus, max_steps=max_steps
    )
    timer.add_input("corpus_index", ws.corpus_dir / "index.json")
    timer.add_input("vae_checkpoint", ws.vae_ckpt)
    timer.add_input("texture_checkpoint", ws.texture_ckpt)
    artifacts.save_checkpoint(
        ws.flow_ckpt, "flow", model, ws.cfg,
        extra={"vae_checkpoint_sha256": artifacts.sha256_file(ws.vae_ckpt)},
    )
    (ws.ckpt_dir / "flow_loss.csv").write_text(trace.to_csv())
    timer.add_output(ws.flow_ckpt)
    timer.add_output(ws.ckpt_dir / "flow_loss.csv")
    timer.write(ws.ckpt_dir / "flow_run_manifest.json")
    click.echo(f"flow backbone -> {ws.flow_ckpt} (final loss {trace.total[-1]:.4f})")


def _load_models(ws: Workspace) -> pipe.TrainedModels:
    ws.require(ws.vae_ckpt, ws.texture_ckpt, ws.flow_ckpt)
    return pipe.TrainedModels(
        codec_vae=artifacts.load_codec(ws.vae_ckpt, ws.cfg, "codec_vae"),
        codec_texture=artifacts.load_codec(ws.texture_ckpt, ws.cfg, "codec_texture"),
        flow=artifacts.load_flow(ws.flow_ckpt, ws.cfg),
    )


@cli.command("generate")
@click.argument("request_file", type=click.Path(exists=True))
@click.option("--name", default="sample", show_default=True, help="Output subdirectory name.")
@pass_workspace
def cmd_generate(ws: Workspace, request_file, name):
    """Generate audio from a request file (segments, singers, texture)."""
    from scipy.io import wavfile

    timer = ws.timer("generate")
    models = _load_models(ws)
    with open(request_file) as fh:
        request = json.load(fh)
    spec, options = pipe.request_to_spec(request, models, ws.cfg)
    latent, waveform = pipe.generate(
        models, spec, options["n_steps"], options["cfg_scale"], options["seed"]
    )
    out_dir = ws.generations_dir / name
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_path = out_dir / "output.wav"
    wavfile.write(wav_path, ws.cfg.corpus.sample_rate, waveform.astype(np.float32))
    latent_path = out_dir / "latent.npy"
    np.save(latent_path, latent.numpy())
    metadata = {
        "request_sha256": artifacts.sha256_file(request_file),
        "options": options,
        "condition_hashes": {
            "tokens": artifacts.sha256_bytes(spec.token_track.tobytes()),
            "structure": artifacts.sha256_bytes(spec.structure_track.tobytes()),
            "singers": artifacts.sha256_bytes(
                b"".join(np.ascontiguousarray(s).tobytes() for s in spec.singer_sets)
            ),
            "texture": None if spec.texture is None
            else artifacts.sha256_bytes(np.ascontiguousarray(spec.texture.pooled).tobytes()),
        },
        "n_frames": spec.n_frames,
        "duration_s": spec.n_frames / ws.cfg.corpus.frame_rate,
    }
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(metadata, fh, sort_keys=True, indent=1)
    timer.add_input("request", request_file)
    timer.add_input("flow_checkpoint", ws.flow_ckpt)
    for p in (wav_path, latent_path, out_dir / "metadata.json"):
        timer.add_output(p)
    timer.write(out_dir / "run_manifest.json")
    click.echo(f"generated {metadata['duration_s']:.1f}s of audio -> {wav_path}")


@cli.command("evaluate")
@click.option("--which", type=click.Choice(["texture_swap", "similarity", "attention", "plots", "all"]),
              default="all", show_default=True)
@pass_workspace
def cmd_evaluate(ws: Workspace, which):
    """Run the analysis protocols and write reports."""
    timer = ws.timer(f"evaluate:{which}")
    songs = ws.load_songs()
    cfg = ws.cfg
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    try:
        if which in ("similarity", "all"):
            report = eval_mod.similarity_distributions(
                songs, cfg.corpus,
                slice_len_s=cfg.eval.slice_len_s, overlap_s=cfg.eval.overlap_s,
                max_cross_pairs=cfg.eval.max_cross_pairs, seed=cfg.eval.seed,
                histogram_bins=cfg.eval.histogram_bins,
            )
            path = ws.reports_dir / "similarity.json"
            with open(path, "w") as fh:
                json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            outputs.append(path)
            click.echo(f"similarity: intra {report.intra_mean:.4f} vs cross {report.cross_mean:.4f}")

        if which in ("attention", "all"):
            models = _load_models(ws)
            _, holdout = ws.split(songs)
            ann = pipe.annotate_corpus(holdout[:1], cfg)[0]
            report = eval_mod.attention_report(models.flow.fuser, ann, ws.reports_dir / "attention")
            outputs.append(ws.reports_dir / "attention")
            click.echo(f"attention report for {report['song_id']} ({len(report['segments'])} segments)")

        if which in ("texture_swap", "all"):
            models = _load_models(ws)
            _, holdout = ws.split(songs)
            annotations = pipe.annotate_corpus(holdout, cfg)
            report = eval_mod.texture_swap_protocol(
                models, holdout, annotations, cfg.corpus, cfg.eval, cfg.inference
            )
            path = ws.reports_dir / "texture_swap.json"
            with open(path, "w") as fh:
                json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            outputs.append(path)
            click.echo(eval_mod.summary_table(report))

        if which in ("plots", "all"):
            song = songs[-1]
            plot_dir = ws.reports_dir / "plots"
            info1 = eval_mod.emit_pitch_salience(
                song.waveform, cfg.corpus.sample_rate, plot_dir / f"{song.manifest.song_id}_salience.png",
                cfg.eval,
            )
            info2 = eval_mod.emit_mel_spectrogram(
                song.waveform, cfg.corpus.sample_rate, plot_dir / f"{song.manifest.song_id}_mel.png",
                cfg.eval,
            )
            outputs += [Path(info1["png"]), Path(info2["png"])]
            click.echo(f"plots -> {plot_dir}")
    except ChoraleError:
        raise
    except Exception as err:  # evaluation machinery failure
        raise EvaluationError(str(err)) from err

    timer.add_input("corpus_index", ws.corpus_dir / "index.json")
    for p in outputs:
        timer.add_output(p)
    timer.write(ws.reports_dir / f"evaluate_{which}_run_manifest.json")


@cli.command("show-config")
@click.option("--profile", type=click.Choice(["desk", "smoke"]), default="desk", show_default=True)
@click.argument("output", type=click.Path(), required=False)
@pass_workspace
def cmd_show_config(ws: Workspace, profile, output):
    """Print (or write) a config profile as YAML."""
    from .config import smoke_config

    cfg = desk_config() if profile == "desk" else smoke_config()
    if output:
        save_config(cfg, output)
        click.echo(f"wrote {profile} profile to {output}")
    else:
        import yaml

        click.echo(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False, auto_envvar_prefix="CHORALE")
        return EXIT_OK
    except click.exceptions.Abort:
        return EXIT_FAILURE
    except click.UsageError as err:
        err.show()
        return EXIT_CONFIG
    except ConfigurationError as err:
        click.echo(f"configuration error: {err}", err=True)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        click.echo(f"missing artifact: {err}", err=True)
        return EXIT_MISSING_ARTIFACT
    except (TrainingFailureError,) as err:
        click.echo(f"training failure: {err}", err=True)
        return EXIT_TRAINING
    except (EvaluationError, SamplingFailureError) as err:
        click.echo(f"evaluation failure: {err}", err=True)
        return EXIT_EVALUATION
    except ChoraleError as err:
        click.echo(f"error: {err}", err=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
