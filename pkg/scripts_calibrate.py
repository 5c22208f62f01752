"""Calibration run: train the default pipeline and measure criteria 4/7/8."""
import sys
import time

import numpy as np
import torch

from chorale.config import PipelineConfig
from chorale import corpus as C, codec as K, flow as F
from chorale import evaluate as E
from chorale import pipeline as P

t_all = time.time()
cfg = PipelineConfig()
cfg.corpus.n_songs = 40
cfg.corpus.n_singers = 2

steps_vae = int(sys.argv[1]) if len(sys.argv) > 1 else cfg.codec.steps_vae
steps_tex = int(sys.argv[2]) if len(sys.argv) > 2 else cfg.codec.steps_texture
steps_flow = int(sys.argv[3]) if len(sys.argv) > 3 else cfg.flow.steps

t0 = time.time()
songs = C.make_corpus(cfg.corpus.seed, cfg.corpus.n_songs, cfg.corpus)
train_songs, holdout = P.split_corpus(songs, cfg.eval.holdout_fraction)
anns_train = P.annotate_corpus(train_songs, cfg)
anns_hold = P.annotate_corpus(holdout, cfg)
print(f"[{time.time()-t0:6.1f}s] corpus {len(train_songs)} train / {len(holdout)} holdout")

t0 = time.time()
vae, tr1 = K.train_vae(train_songs, cfg.codec, cfg.corpus, max_steps=steps_vae)
print(f"[{time.time()-t0:6.1f}s] vae {steps_vae} steps: loss {tr1.total[0]:.3f} -> {tr1.total[-1]:.3f}")

fuser = P.make_frozen_fuser(cfg)
tracks = [P.prompt_track_for(a, fuser, cfg.flow.d_prompt) for a in anns_train]
t0 = time.time()
tex, tr2 = K.train_texture_stage(vae, train_songs, anns_train, tracks, cfg.codec, cfg.corpus, max_steps=steps_tex)
print(f"[{time.time()-t0:6.1f}s] texture {steps_tex} steps: loss {tr2.total[0]:.3f} -> {tr2.total[-1]:.3f}")

# ---- criterion 7a: held-out recon loss true C_ex vs zeroed ----
tracks_hold = [P.prompt_track_for(a, fuser, cfg.flow.d_prompt) for a in anns_hold]
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
        rec_t = K.frames_to_waveform(tex.decode_cond(zt, cond))
        rec_z = K.frames_to_waveform(tex.decode_cond(zt, torch.zeros_like(cond)))
        loss_true.append(float(K.stft_loss(y, rec_t)))
        loss_zero.append(float(K.stft_loss(y, rec_z)))
ratio_recon = np.mean(loss_true) / np.mean(loss_zero)
print(f"criterion7a recon ratio (true/zero): {ratio_recon:.3f}  (need <= 0.8)")

# ---- criterion 7b: f0 probe RMSE ratio (texture vs stage-1 latents) ----
def probe_rmse(codec, songs_list, anns_list):
    X, yv = [], []
    with torch.no_grad():
        for song, ann in zip(songs_list, anns_list):
            frames = K.waveform_to_frames(song.waveform, cfg.corpus.hop, 4)
            mu, _ = codec.encode(frames)
            n_lat = min(mu.shape[0], ann.n_frames // 4)
            f0 = ann.f0_track[: n_lat * 4].reshape(n_lat, 4)
            voiced_frac = (f0 > 0).mean(axis=1)
            with np.errstate(divide="ignore"):
                logf = np.where(f0 > 0, np.log2(np.maximum(f0, 1e-6)), 0.0)
            mean_logf = logf.sum(axis=1) / np.maximum((f0 > 0).sum(axis=1), 1)
            keep = voiced_frac > 0.5
            X.append(mu[:n_lat].numpy()[keep])
            yv.append(mean_logf[keep])
    X = np.concatenate(X); yv = np.concatenate(yv)
    n_train = int(0.7 * len(X))
    Xtr, Xte = X[:n_train], X[n_train:]
    ytr, yte = yv[:n_train], yv[n_train:]
    A = np.concatenate([Xtr, np.ones((len(Xtr), 1))], axis=1)
    w, *_ = np.linalg.lstsq(A.T @ A + 1e-6 * np.eye(A.shape[1]), A.T @ ytr, rcond=None)
    pred = np.concatenate([Xte, np.ones((len(Xte), 1))], axis=1) @ w
    return float(np.sqrt(np.mean((pred - yte) ** 2)))

rmse_stage1 = probe_rmse(vae, holdout, anns_hold)
rmse_texture = probe_rmse(tex, holdout, anns_hold)
print(f"criterion7b probe rmse: stage1={rmse_stage1:.4f} texture={rmse_texture:.4f} "
      f"ratio={rmse_texture/rmse_stage1:.2f} (need >= 1.5)")

# ---- flow training ----
t0 = time.time()
model, tr3 = F.train_flow(train_songs, anns_train, vae, tex, cfg.flow, cfg.corpus, max_steps=steps_flow)
print(f"[{time.time()-t0:6.1f}s] flow {steps_flow} steps: loss {tr3.total[0]:.3f} -> {tr3.total[-1]:.3f}")

models = P.TrainedModels(vae, tex, model)

# ---- criterion 4: energy distance ratio ----
t0 = time.time()
data_hold = F.prepare_flow_data(holdout, anns_hold, vae, tex, cfg.corpus)
rng = np.random.default_rng(2024)
n_e = 256
reals, bundles_parts = [], []
for i in range(n_e):
    v = F._window_batch(data_hold, rng, cfg.flow.window_frames, 4, cfg.corpus.frame_rate)
    reals.append(v["z1"].numpy())
    bundles_parts.append(v)
real = np.stack(reals)
gen_lat = []
bs = 64
for a in range(0, n_e, bs):
    chunk = bundles_parts[a : a + bs]
    bundle = model.build_bundle(
        torch.as_tensor(np.stack([v["tokens"] for v in chunk])),
        torch.as_tensor(np.stack([v["structure"] for v in chunk])),
        torch.as_tensor(np.stack([v["segments"] for v in chunk])),
        [v["singer_sets"] for v in chunk],
        torch.stack([v["texture"] for v in chunk]),
        torch.as_tensor([v["start_time"] for v in chunk], dtype=torch.float32),
    )
    z = F.euler_sample(model, bundle, 50, 1.0, np.random.default_rng(777 + a), n_frames=real.shape[1])
    gen_lat.append(z.numpy())
gen_lat = np.concatenate(gen_lat)
prior = np.random.default_rng(888).standard_normal(real.shape)
e_gen = E.energy_distance(gen_lat, real)
e_prior = E.energy_distance(prior, real)
print(f"[{time.time()-t0:6.1f}s] criterion4 energy: gen={e_gen:.3f} prior={e_prior:.3f} "
      f"ratio={e_gen/e_prior:.3f} (need <= 0.3)")

# ---- criterion 8: texture swap ----
t0 = time.time()
report = E.texture_swap_protocol(models, holdout, anns_hold, cfg.corpus, cfg.eval, cfg.inference)
print(f"[{time.time()-t0:6.1f}s] criterion8 texture swap: corr={report.aggregate['correlation']:.4f} "
      f"rmse={report.aggregate['f0_rmse_cents']:.1f}c (need corr >= 0.95)")
print(f"TOTAL {time.time()-t_all:.0f}s")
