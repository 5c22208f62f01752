"""Sweep stage-2 hyperparameters against criteria 7a/7b, caching stage 1."""
import pickle
import sys
import time
from pathlib import Path

import numpy as np
import torch

from chorale.config import PipelineConfig
from chorale import corpus as C, codec as K
from chorale import pipeline as P

CACHE = Path("/tmp/chorale_cache")
CACHE.mkdir(exist_ok=True)

cfg = PipelineConfig()
cfg.corpus.n_songs = 40
cfg.corpus.n_singers = 2

songs = C.make_corpus(cfg.corpus.seed, cfg.corpus.n_songs, cfg.corpus)
train_songs, holdout = P.split_corpus(songs, cfg.eval.holdout_fraction)

ann_cache = CACHE / "anns.pkl"
if ann_cache.exists():
    anns_train, anns_hold = pickle.loads(ann_cache.read_bytes())
else:
    anns_train = P.annotate_corpus(train_songs, cfg)
    anns_hold = P.annotate_corpus(holdout, cfg)
    ann_cache.write_bytes(pickle.dumps((anns_train, anns_hold)))

vae_cache = CACHE / "vae1500.pt"
if vae_cache.exists():
    vae = K.VocalCodec(cfg.codec, cfg.corpus)
    vae.load_state_dict(torch.load(vae_cache, weights_only=True))
    vae.stage = "vae"
else:
    t0 = time.time()
    vae, tr1 = K.train_vae(train_songs, cfg.codec, cfg.corpus, max_steps=1500)
    print(f"vae 1500 steps in {time.time()-t0:.0f}s loss {tr1.total[-1]:.3f}")
    torch.save(vae.state_dict(), vae_cache)

fuser = P.make_frozen_fuser(cfg)
tracks = [P.prompt_track_for(a, fuser, cfg.flow.d_prompt) for a in anns_train]
tracks_hold = [P.prompt_track_for(a, fuser, cfg.flow.d_prompt) for a in anns_hold]


def measure(tex):
    gen = torch.Generator().manual_seed(99)
    loss_true, loss_zero = [], []
    with torch.no_grad():
        for song, ann, ptrack in zip(holdout, anns_hold, tracks_hold):
            frames = K.waveform_to_frames(song.waveform, cfg.corpus.hop, 4)
            n = (ann.n_frames // 4) * 4
            frames = frames[:n]
            cond = tex.build_conditions(
                torch.as_tensor(ann.token_track[:n]),
                torch.as_tensor(ptrack[:n], dtype=torch.float32),
                ann.f0_track[:n],
            ).concat()
            mu, logvar = tex.encode(frames)
            z = K.reparameterize(mu, logvar, gen)
            zt = K.perturb_latent(z, cfg.codec.snr_db, gen)
            y = K.frames_to_waveform(frames)
            loss_true.append(float(K.stft_loss(y, K.frames_to_waveform(tex.decode_cond(zt, cond)))))
            loss_zero.append(float(K.stft_loss(y, K.frames_to_waveform(tex.decode_cond(zt, torch.zeros_like(cond))))))
    ratio_recon = np.mean(loss_true) / np.mean(loss_zero)

    def probe_rmse(codec):
        X, yv = [], []
        with torch.no_grad():
            for song, ann in zip(holdout, anns_hold):
                frames = K.waveform_to_frames(song.waveform, cfg.corpus.hop, 4)
                mu, _ = codec.encode(frames)
                n_lat = min(mu.shape[0], ann.n_frames // 4)
                f0 = ann.f0_track[: n_lat * 4].reshape(n_lat, 4)
                voiced_frac = (f0 > 0).mean(axis=1)
                logf = np.where(f0 > 0, np.log2(np.maximum(f0, 1e-6)), 0.0)
                mean_logf = logf.sum(axis=1) / np.maximum((f0 > 0).sum(axis=1), 1)
                keep = voiced_frac > 0.5
                X.append(mu[:n_lat].numpy()[keep])
                yv.append(mean_logf[keep])
        X = np.concatenate(X); yv = np.concatenate(yv)
        n_train = int(0.7 * len(X))
        A = np.concatenate([X[:n_train], np.ones((n_train, 1))], axis=1)
        w = np.linalg.solve(A.T @ A + 1e-6 * np.eye(A.shape[1]), A.T @ yv[:n_train])
        Ate = np.concatenate([X[n_train:], np.ones((len(X) - n_train, 1))], axis=1)
        return float(np.sqrt(np.mean((Ate @ w - yv[n_train:]) ** 2)))

    return ratio_recon, probe_rmse(vae), probe_rmse(tex)


import dataclasses
for beta, steps, lr in [
    (float(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3)
]:
    kcfg = dataclasses.replace(cfg.codec, beta_kl_texture=beta, lr=lr)
    t0 = time.time()
    tex, tr2 = K.train_texture_stage(vae, train_songs, anns_train, tracks, kcfg, cfg.corpus, max_steps=steps)
    ratio, r1, rt = measure(tex)
    print(f"beta={beta} steps={steps} lr={lr}: [{time.time()-t0:.0f}s] "
          f"loss {tr2.total[0]:.3f}->{tr2.total[-1]:.3f} stft_end={tr2.stft[-1]:.3f} kl_end={tr2.kl[-1]:.3f} | "
          f"7a ratio={ratio:.3f} | 7b stage1={r1:.3f} tex={rt:.3f} ratio={rt/r1:.2f}")
