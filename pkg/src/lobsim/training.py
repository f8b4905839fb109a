"""Self-supervised training of the order denoiser.

Each step noises only the target order of a window via the closed-form forward
process and optimizes the mixed objective: noise MSE plus a small weighted
variational term that trains the variance head (mean stop-gradded). Diffusion
steps are drawn with the loss-aware importance sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import WindowDataset
from .diffusion import (
    ImportanceSampler,
    LossBreakdown,
    NoiseSchedule,
    cosine_schedule,
    loss_eps,
    loss_vlb,
    q_sample,
)
from .model import ModelBundle, ModelConfig, OrderFlowDenoiser


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_steps: int = 70_000
    steps_per_epoch: int = 500
    patience: int = 5  # epochs of no validation improvement before stopping
    lambda_sigma: float = 0.01
    diffusion_steps: int = 100
    schedule_offset: float = 0.008
    ema_decay: float = 0.999  # weight average used for validation and the bundle
    seed: int = 0


class _Batcher:
    """Random window batches as torch tensors."""

    def __init__(self, dataset: WindowDataset, config: ModelConfig, batch_size: int,
                 rng: np.random.Generator):
        self.ds = dataset
        self.cfg = config
        self.batch_size = batch_size
        self.rng = rng
        if len(dataset) < 1:
            raise ValueError("dataset has no complete windows")

    def sample(self, indices=None):
        if indices is None:
            indices = self.rng.integers(0, len(self.ds), size=self.batch_size)
        cond_f, cond_t, lob, tgt_f, tgt_t = [], [], [], [], []
        for i in indices:
            f, ty, lb, tf, tt = self.ds.get(int(i))
            cond_f.append(f)
            cond_t.append(ty)
            lob.append(lb)
            tgt_f.append(tf)
            tgt_t.append(tt)
        return (
            torch.tensor(np.stack(cond_f), dtype=torch.float32),
            torch.tensor(np.stack(cond_t), dtype=torch.long),
            torch.tensor(np.stack(lob), dtype=torch.float32),
            torch.tensor(np.stack(tgt_f), dtype=torch.float32),
            torch.tensor(np.stack(tgt_t), dtype=torch.long),
        )


def training_step(
    model: OrderFlowDenoiser,
    batch,
    schedule: NoiseSchedule,
    sampler: ImportanceSampler,
    lambda_sigma: float,
    rng: np.random.Generator,
    torch_gen: torch.Generator,
) -> torch.Tensor:
    """Mixed loss for one batch with per-example importance-sampled diffusion steps."""
    cond_f, cond_t, lob, tgt_f, tgt_t = batch
    x0 = torch.cat([tgt_f, model.type_embedding(tgt_t)], dim=-1)[:, None, :]
    t, weight = sampler.sample_batch(rng, x0.shape[0])
    eps = torch.randn(x0.shape, generator=torch_gen, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat, v = model(cond_f, cond_t, lob, x_t, torch.tensor(t))
    l_eps = loss_eps(eps, eps_hat, per_example=True)
    l_sigma = loss_vlb(
        x0.detach(), x_t.detach(), eps_hat.detach(), v, t, schedule, per_example=True
    )
    for t_i, l_i in zip(t, l_sigma.detach().numpy()):
        sampler.update(int(t_i), float(l_i))
    w = x0.new_tensor(weight)
    total = (w * (l_eps + lambda_sigma * l_sigma)).mean()
    return total, LossBreakdown(
        float(l_eps.detach().mean()), float(l_sigma.detach().mean()), float(total.detach())
    )


def evaluate_loss(model, batcher: _Batcher, schedule, lambda_sigma, n_batches, seed):
    """Deterministic validation loss over fixed windows and uniform steps."""
    rng = np.random.default_rng(seed)
    model.eval()
    total = 0.0
    with torch.no_grad():
        for _ in range(n_batches):
            batch = _to_eval_batch(batcher, rng)
            cond_f, cond_t, lob, tgt_f, tgt_t = batch
            x0 = torch.cat([tgt_f, model.type_embedding(tgt_t)], dim=-1)[:, None, :]
            t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
            eps = torch.tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
            x_t = q_sample(x0, t, eps, schedule)
            eps_hat, v = model(cond_f, cond_t, lob, x_t, torch.tensor(t))
            l = loss_eps(eps, eps_hat) + lambda_sigma * loss_vlb(x0, x_t, eps_hat, v, t, schedule)
            total += float(l)
    model.train()
    return total / n_batches


def _to_eval_batch(batcher: _Batcher, rng: np.random.Generator):
    indices = rng.integers(0, len(batcher.ds), size=batcher.batch_size)
    return batcher.sample(indices)


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list  # (epoch, step, train_loss, val_loss, lr)
    best_val_loss: float


def train(
    train_ds: WindowDataset,
    val_ds: WindowDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log=None,
) -> TrainResult:
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    torch_gen = torch.Generator().manual_seed(train_config.seed)

    model = OrderFlowDenoiser(model_config)
    schedule = cosine_schedule(train_config.diffusion_steps, train_config.schedule_offset)
    sampler = ImportanceSampler(schedule.T)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)

    batcher = _Batcher(train_ds, model_config, train_config.batch_size, rng)
    val_batcher = _Batcher(val_ds, model_config, train_config.batch_size, rng)
    n_val_batches = max(1, min(8, len(val_ds) // train_config.batch_size))

    ema = {k: v.detach().clone().double() for k, v in model.state_dict().items()}

    def ema_update():
        d = train_config.ema_decay
        with torch.no_grad():
            for k, v in model.state_dict().items():
                ema[k].mul_(d).add_(v.double(), alpha=1.0 - d)

    def ema_state():
        return {k: v.to(dtype=model.state_dict()[k].dtype) for k, v in ema.items()}

    best_val = math.inf
    best_state = None
    bad_epochs = 0
    history = []
    step = 0
    lr = train_config.learning_rate
    model.train()
    while step < train_config.max_steps:
        epoch_loss = 0.0
        n = 0
        for _ in range(train_config.steps_per_epoch):
            if step >= train_config.max_steps:
                break
            batch = batcher.sample()
            optimizer.zero_grad()
            total, parts = training_step(
                model, batch, schedule, sampler, train_config.lambda_sigma, rng, torch_gen
            )
            total.backward()
            optimizer.step()
            ema_update()
            epoch_loss += parts.total
            n += 1
            step += 1
        # validate on the averaged weights; they are what the bundle ships
        raw_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        model.load_state_dict(ema_state())
        val = evaluate_loss(
            model, val_batcher, schedule, train_config.lambda_sigma, n_val_batches,
            seed=train_config.seed + 1,
        )
        model.load_state_dict(raw_state)
        history.append((len(history), step, epoch_loss / max(n, 1), val, lr))
        if log:
            log(f"epoch {len(history) - 1}: step {step} train {epoch_loss / max(n, 1):.4f} "
                f"val {val:.4f} lr {lr:.2e}")
        if val < best_val:
            best_val = val
            best_state = ema_state()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                break
            if bad_epochs % 2 == 0:  # halve the rate after two stale epochs
                lr /= 2.0
                for group in optimizer.param_groups:
                    group["lr"] = lr

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    bundle = ModelBundle(model, model_config, train_ds.stats, schedule)
    return TrainResult(bundle, history, best_val)
