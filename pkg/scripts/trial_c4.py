"""Criterion-4 trial: train the toy bundle (mirrors the test fixtures), generate
conditionally over val windows, compare moments and type frequencies to the
val-window targets."""

import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import CACHE_TAG, TOY_N_EVENTS, TOY_SEED, TOY_WINDOW, toy_model_config, toy_train_config

from lobsim.data import filter_events, parse_message_file, train_val_split
from lobsim.diffusion import ddpm_generate
from lobsim.model import ModelBundle
from lobsim.synthetic import SyntheticConfig, write_session
from lobsim.training import train

cache = Path("/tmp/lobsim-cache") / f"toy_bundle_{CACHE_TAG}.pt"
d = Path("/tmp/lobsim-trial")
d.mkdir(exist_ok=True)
msg_path, lob_path = write_session(d, SyntheticConfig(n_events=TOY_N_EVENTS, seed=TOY_SEED))
events = filter_events(parse_message_file(msg_path))
train_ds, val_ds = train_val_split(events, window=TOY_WINDOW)
print("windows", len(train_ds), len(val_ds))

if cache.exists():
    bundle = ModelBundle.load(cache)
    print("loaded cached bundle")
else:
    t0 = time.time()
    result = train(train_ds, val_ds, toy_model_config(), toy_train_config(),
                   log=lambda s: print(s, flush=True))
    print(f"trained in {time.time() - t0:.0f}s, best val {result.best_val_loss:.4f}")
    bundle = result.bundle
    cache.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(cache)

model, stats, schedule = bundle.model, bundle.stats, bundle.schedule
model.eval()
emb = model.type_embedding.weight.detach()
rng = np.random.default_rng(7)
torch.manual_seed(7)

targets = np.stack([val_ds.get(i)[3] for i in range(len(val_ds))])
true_types = np.array([val_ds.get(i)[4] for i in range(len(val_ds))])
true = stats.order_scaler.inverse_transform(targets)
true_mean, true_std = true.mean(0), true.std(0)
true_freq = np.bincount(true_types, minlength=3) / len(true_types)

gen_f, gen_t = [], []
t0 = time.time()
with torch.no_grad():
    for s in range(0, len(val_ds), 256):
        idx = range(s, min(s + 256, len(val_ds)))
        cf, ct, lb = [], [], []
        for i in idx:
            f, ty, l, _, _ = val_ds.get(i)
            cf.append(f); ct.append(ty); lb.append(l)
        cf = torch.tensor(np.stack(cf), dtype=torch.float32)
        ct = torch.tensor(np.stack(ct), dtype=torch.long)
        lb = torch.tensor(np.stack(lb), dtype=torch.float32)
        x_T = torch.tensor(rng.standard_normal((len(cf), 1, 8)), dtype=torch.float32)

        def model_fn(x, t):
            return model(cf, ct, lb, x, torch.full((x.shape[0],), t))

        noise = lambda xx: torch.tensor(rng.standard_normal(tuple(xx.shape)), dtype=xx.dtype)
        x = ddpm_generate(x_T, model_fn, schedule, noise, clip_x0=5.0).clamp(-5, 5)
        gen_f.append(x[:, 0, :5].numpy())
        dist = ((x[:, 0, 5:][:, None, :] - emb[None]) ** 2).sum(-1)
        gen_t.append(dist.argmin(-1).numpy())
print(f"generated {len(val_ds)} in {time.time() - t0:.0f}s")

gf = stats.order_scaler.inverse_transform(np.concatenate(gen_f))
gt = np.concatenate(gen_t)
names = ["offset", "size", "depth", "direction", "price"]
print(f"{'feat':10s} {'gen_mean':>11s} {'true_mean':>11s} {'rel':>6s}  {'gen_std':>10s} {'true_std':>10s} {'rel':>6s}")
for j, nm in enumerate(names):
    rm = abs(gf[:, j].mean() - true_mean[j]) / max(abs(true_mean[j]), 1e-12)
    rs = abs(gf[:, j].std() - true_std[j]) / true_std[j]
    flag = "" if (rm <= 0.10 and rs <= 0.10) else "  <-- FAIL"
    print(f"{nm:10s} {gf[:, j].mean():11.4f} {true_mean[j]:11.4f} {rm:6.3f}  "
          f"{gf[:, j].std():10.4f} {true_std[j]:10.4f} {rs:6.3f}{flag}")
gen_freq = np.bincount(gt, minlength=3) / len(gt)
print("type freq gen :", np.round(gen_freq, 4))
print("type freq true:", np.round(true_freq, 4))
print("abs diff      :", np.round(np.abs(gen_freq - true_freq), 4), "(limit 0.05)")
