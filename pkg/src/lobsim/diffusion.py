"""Conditional DDPM mathematics: noise schedule, forward/reverse steps, losses,
importance-sampled step selection, and deterministic DDIM sampling.

The array ops are written against the common numpy/torch operator surface, so
the schedule math can be unit-tested in numpy while training runs in torch.
Diffusion steps are indexed t = 1..T; schedule arrays store index t at [t-1].
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class NoiseSchedule:
    """Precomputed beta/alpha arrays for T diffusion steps."""

    T: int
    s: float
    betas: np.ndarray  # beta_t, t = 1..T
    alphas: np.ndarray  # 1 - beta_t
    alpha_bars: np.ndarray  # cumulative product of alphas
    beta_tildes: np.ndarray  # posterior variances; beta_tilde_1 pinned to beta_1

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step t, with alpha_bar(0) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def settings(self) -> dict:
        return {"T": self.T, "s": self.s}


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha_bar schedule with beta clipped to <= 0.999."""
    if T < 1 or s <= 0:
        raise ValueError("need T >= 1 and s > 0")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * (math.pi / 2)) ** 2
    alpha_bar = f / f[0]
    betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, 0.999)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    beta_tildes = (1.0 - prev) / (1.0 - alpha_bars) * betas
    beta_tildes[0] = betas[0]  # sigma^2_1 = beta_1; avoids log(0) in interpolation
    return NoiseSchedule(T, s, betas, alphas, alpha_bars, beta_tildes)


def _gather(values: np.ndarray, t, like):
    """Schedule value(s) at step(s) t, shaped to broadcast against `like`.

    t may be a python int or a 1-D array of per-example steps; in the latter
    case the result has shape (B, 1, ..., 1) matching `like`'s rank.
    """
    if isinstance(t, (int, np.integer)):
        return float(values[t - 1])
    idx = np.asarray(t, dtype=np.int64) - 1
    out = values[idx]
    if hasattr(like, "new_tensor"):  # torch tensor
        out = like.new_tensor(out)
    shape = (len(idx),) + (1,) * (like.ndim - 1)
    return out.reshape(shape)


def _abar(schedule: NoiseSchedule, t, like):
    padded = np.concatenate(([1.0], schedule.alpha_bars))
    if isinstance(t, (int, np.integer)):
        return float(padded[t])
    idx = np.asarray(t, dtype=np.int64)
    out = padded[idx]
    if hasattr(like, "new_tensor"):
        out = like.new_tensor(out)
    return out.reshape((len(idx),) + (1,) * (like.ndim - 1))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    abar = _abar(schedule, t, x0)
    return (abar**0.5) * x0 + ((1.0 - abar) ** 0.5) * eps


def sigma_squared_from_v(v, t, schedule: NoiseSchedule):
    """Log-interpolated variance between beta_tilde_t (v=0) and beta_t (v=1)."""
    like = v if hasattr(v, "ndim") else np.float64(0.0)
    log_beta = _gather(np.log(schedule.betas), t, like)
    log_beta_tilde = _gather(np.log(schedule.beta_tildes), t, like)
    if hasattr(v, "exp"):  # torch tensor
        return (v * log_beta + (1 - v) * log_beta_tilde).exp()
    return np.exp(v * log_beta + (1 - v) * log_beta_tilde)


def reverse_step(x_t, eps_hat, v, t: int, z, schedule: NoiseSchedule):
    """One ancestral denoising step x_t -> x_{t-1}; caller passes z = 0 at t = 1."""
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bar(t)
    mean = (x_t - beta / ((1.0 - abar) ** 0.5) * eps_hat) / (alpha**0.5)
    sigma = sigma_squared_from_v(v, t, schedule) ** 0.5
    return mean + sigma * z


def posterior_mean_variance(x0, x_t, t, schedule: NoiseSchedule):
    """Mean and variance of the closed-form Gaussian posterior q(x_{t-1} | x_t, x0)."""
    abar = _abar(schedule, t, x_t)
    abar_prev = _abar(schedule, np.asarray(t) - 1 if not isinstance(t, int) else t - 1, x_t)
    beta = _gather(schedule.betas, t, x_t)
    alpha = _gather(schedule.alphas, t, x_t)
    coef0 = (abar_prev**0.5) * beta / (1.0 - abar)
    coef_t = (alpha**0.5) * (1.0 - abar_prev) / (1.0 - abar)
    var = _gather(schedule.beta_tildes, t, x_t)
    return coef0 * x0 + coef_t * x_t, var


def model_mean(x_t, eps_hat, t, schedule: NoiseSchedule):
    """The learned reverse-process mean under the noise parametrization."""
    beta = _gather(schedule.betas, t, x_t)
    alpha = _gather(schedule.alphas, t, x_t)
    abar = _abar(schedule, t, x_t)
    return (x_t - beta / ((1.0 - abar) ** 0.5) * eps_hat) / (alpha**0.5)


def loss_eps(eps, eps_hat, per_example: bool = False):
    """Mean squared error on the noise prediction over the generation slot."""
    diff = eps_hat - eps
    sq = diff * diff
    if per_example:
        return sq.reshape(sq.shape[0], -1).mean(-1)
    return sq.mean()


def _gaussian_kl(mean_q, var_q, mean_p, var_p):
    log_ratio = _log(var_p) - _log(var_q)
    return 0.5 * (log_ratio + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0)


def _log(x):
    if hasattr(x, "log"):
        return x.log()
    return np.log(x)


def loss_vlb(x0, x_t, eps_hat, v, t, schedule: NoiseSchedule, per_example: bool = False):
    """Variational term training the learned variance.

    For t >= 2 this is the KL between the closed-form posterior and the model
    distribution; for t = 1 it is the diagonal-Gaussian negative log-likelihood
    of x0. The model mean is treated as constant by the caller (stop-gradient
    on eps_hat), so this term only trains the variance head. t may be an int or
    a per-example array; with per_example=True the batch axis is kept.
    """
    var_p = sigma_squared_from_v(v, t, schedule)
    mean_p = model_mean(x_t, eps_hat, t, schedule)
    if isinstance(t, (int, np.integer)):
        if t == 1:
            nll = 0.5 * (_log(var_p) + math.log(2 * math.pi) + (x0 - mean_p) ** 2 / var_p)
            term = nll
        else:
            mean_q, var_q = posterior_mean_variance(x0, x_t, t, schedule)
            term = _gaussian_kl(mean_q, var_q, mean_p, var_p)
    else:
        nll = 0.5 * (_log(var_p) + math.log(2 * math.pi) + (x0 - mean_p) ** 2 / var_p)
        mean_q, var_q = posterior_mean_variance(x0, x_t, t, schedule)
        kl = _gaussian_kl(mean_q, var_q, mean_p, var_p)
        is_first = np.asarray(t) == 1
        mask = _as_like(is_first.astype(np.float64), x_t)
        term = mask * nll + (1.0 - mask) * kl
    if per_example:
        return term.reshape(term.shape[0], -1).mean(-1)
    return term.mean()


def _as_like(values: np.ndarray, like):
    """1-D per-example array shaped (B, 1, ..., 1) to broadcast against `like`."""
    out = like.new_tensor(values) if hasattr(like, "new_tensor") else values
    return out.reshape((len(values),) + (1,) * (like.ndim - 1))


def loss_prior(x0, schedule: NoiseSchedule):
    """KL(q(x_T | x0) || N(0, I)): theta-free under a fixed forward process,
    computed for logging only."""
    abar = schedule.alpha_bar(schedule.T)
    mean = (abar**0.5) * x0
    return float(np.mean(0.5 * (-np.log(1.0 - abar) + (1.0 - abar) + mean**2 - 1.0)))


@dataclass
class LossBreakdown:
    l_eps: float
    l_sigma: float
    total: float


class ImportanceSampler:
    """Loss-aware diffusion-step sampler: p_t proportional to sqrt(E[L_t^2]).

    Falls back to uniform sampling until every step has `min_history` recorded
    losses. Sampled steps come with weight 1 / (T * p_t) so reweighted losses
    stay unbiased estimates of the uniform-t expectation.
    """

    def __init__(self, T: int, min_history: int = 10):
        self.T = T
        self.min_history = min_history
        self._history: list[deque] = [deque(maxlen=min_history) for _ in range(T)]

    @property
    def warmed_up(self) -> bool:
        return all(len(h) >= self.min_history for h in self._history)

    def probabilities(self) -> np.ndarray:
        if not self.warmed_up:
            return np.full(self.T, 1.0 / self.T)
        weights = np.array([math.sqrt(np.mean(np.square(h))) for h in self._history])
        total = weights.sum()
        if total <= 0:
            return np.full(self.T, 1.0 / self.T)
        return weights / total

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        """Draw a step t in 1..T; returns (t, weight)."""
        p = self.probabilities()
        t = int(rng.choice(self.T, p=p)) + 1
        return t, 1.0 / (self.T * p[t - 1])

    def sample_batch(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw n independent steps; returns (t array, weight array).

        Samples from a half-uniform mixture: the pure loss-aware distribution
        concentrates on the high-loss (low-t) steps and starves the rest of the
        schedule, which wrecks the noise-prediction head. The mixture bounds
        every step's probability below by 1/(2T); weights keep it unbiased.
        """
        p = 0.5 * self.probabilities() + 0.5 / self.T
        ts = rng.choice(self.T, size=n, p=p).astype(np.int64) + 1
        return ts, 1.0 / (self.T * p[ts - 1])

    def update(self, t: int, loss: float) -> None:
        self._history[t - 1].append(float(loss))


def ddim_steps(T: int, steps: int) -> list[int]:
    """Strided descending subsequence of 1..T used by the implicit sampler."""
    if steps < 1 or steps > T:
        raise ValueError("need 1 <= steps <= T")
    ts = np.unique(np.linspace(T, 1, steps).round().astype(int))[::-1]
    return [int(t) for t in ts]


def ddim_generate(x_T, eps_fn, schedule: NoiseSchedule, steps: int):
    """Deterministic implicit sampling (eta = 0) over a strided step subsequence.

    eps_fn(x_t, t) returns the predicted noise; called exactly `steps` times.
    """
    ts = ddim_steps(schedule.T, steps)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        abar = schedule.alpha_bar(t)
        abar_prev = schedule.alpha_bar(t_prev)
        eps_hat = eps_fn(x, t)
        x0_hat = (x - ((1.0 - abar) ** 0.5) * eps_hat) / (abar**0.5)
        x = (abar_prev**0.5) * x0_hat + ((1.0 - abar_prev) ** 0.5) * eps_hat
    return x


def ddpm_generate(x_T, model_fn, schedule: NoiseSchedule, rng, clip_x0=None):
    """Full ancestral sampling. model_fn(x_t, t) returns (eps_hat, v); called T times.

    rng supplies the per-step Gaussian noise (numpy Generator or a callable
    shaped like x_T). With clip_x0 set, each step clamps the implied x0 to
    [-clip_x0, clip_x0] and steps through the closed-form posterior instead
    (clipped-denoised sampling); this keeps imperfect noise predictions from
    compounding into overdispersed samples.
    """
    x = x_T
    for t in range(schedule.T, 0, -1):
        eps_hat, v = model_fn(x, t)
        if t > 1:
            z = rng(x) if callable(rng) else rng.standard_normal(np.shape(x))
        else:
            z = 0.0
        if clip_x0 is None:
            x = reverse_step(x, eps_hat, v, t, z, schedule)
        else:
            abar = schedule.alpha_bar(t)
            x0_hat = (x - ((1.0 - abar) ** 0.5) * eps_hat) / (abar**0.5)
            x0_hat = _clip(x0_hat, clip_x0)
            mean, _ = posterior_mean_variance(x0_hat, x, t, schedule)
            x = mean + (sigma_squared_from_v(v, t, schedule) ** 0.5) * z
    return x


def _clip(x, bound: float):
    if hasattr(x, "clamp"):
        return x.clamp(-bound, bound)
    return np.clip(x, -bound, bound)
