"""Quantitative evaluation of simulated markets: predictive score (train on
synthetic, test on real), stylized-fact statistics, PCA convex-hull coverage,
and market-impact curves from paired runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from shapely.geometry import MultiPoint
from sklearn.decomposition import PCA
from torch import nn

from .book import MISSING
from .sim import SimOutput


class InsufficientData(Exception):
    pass


# ---------------------------------------------------------------------------
# autocorrelation and stylized facts


def acf(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag; NaN for constant series."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    x = x - x.mean()
    denom = np.dot(x, x)
    if denom == 0:
        return np.full(max_lag + 1, np.nan)
    out = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        out[k] = np.dot(x[: n - k], x[k:]) / denom if k < n else np.nan
    return out


def significance_band(n: int) -> float:
    """Half-width of the white-noise ACF confidence band."""
    return 1.96 / math.sqrt(n)


@dataclass
class StylizedFactsReport:
    lags_minutes: np.ndarray
    returns_acf: np.ndarray
    squared_returns_acf: np.ndarray
    volume_volatility_corr: float
    returns_volatility_corr: float
    histogram_bins: np.ndarray
    histogram_counts: np.ndarray
    kurtosis: float
    acf_band: float
    degenerate: bool = False  # constant mid-price path


def _minute_series(times: np.ndarray, values: np.ndarray, reducer) -> tuple[np.ndarray, np.ndarray]:
    minutes = np.floor(times / 60.0).astype(np.int64)
    uniq = np.unique(minutes)
    out = np.array([reducer(values[minutes == m]) for m in uniq], dtype=np.float64)
    return uniq.astype(np.float64) * 60.0, out


def stylized_facts(
    times: np.ndarray,
    mids: np.ndarray,
    trade_volumes: np.ndarray | None = None,
    max_lag: int = 30,
    vol_window_minutes: int = 15,
    n_bins: int = 50,
) -> StylizedFactsReport:
    """Minute-scale stylized facts from an event-level mid-price path.

    `trade_volumes` is the per-event traded size (0 for non-executions); when
    omitted, volume correlations are reported as NaN.
    """
    valid = mids != MISSING
    times, mids = times[valid], mids[valid]
    if trade_volumes is not None:
        trade_volumes = trade_volumes[valid]
    if len(mids) < 3:
        raise InsufficientData("need at least 3 mid observations")

    _, minute_mid = _minute_series(times, mids, lambda v: v[-1])
    if np.all(minute_mid == minute_mid[0]):
        nan = np.full(max_lag + 1, np.nan)
        return StylizedFactsReport(
            np.arange(max_lag + 1, dtype=float), nan, nan, float("nan"), float("nan"),
            np.array([]), np.array([]), float("nan"), float("nan"), degenerate=True,
        )
    returns = np.diff(np.log(minute_mid))
    max_lag = min(max_lag, len(returns) - 1)
    r_acf = acf(returns, max_lag)
    sq_acf = acf(returns**2, max_lag)

    # rolling volatility over a fixed minute window, aligned to return minutes
    w = max(2, vol_window_minutes)
    vol = np.array(
        [returns[max(0, i - w + 1) : i + 1].std() for i in range(len(returns))]
    )
    if trade_volumes is not None:
        _, minute_volume = _minute_series(times, trade_volumes, np.sum)
        minute_volume = minute_volume[1 : len(returns) + 1]
        vv = _corr(minute_volume, vol)
    else:
        vv = float("nan")
    rv = _corr(returns, vol)
    counts, bins = np.histogram(returns, bins=n_bins)
    kurt = _kurtosis(returns)
    return StylizedFactsReport(
        np.arange(max_lag + 1, dtype=float), r_acf, sq_acf, vv, rv,
        bins, counts, kurt, significance_band(len(returns)),
    )


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) != len(b) or len(a) < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def _kurtosis(x: np.ndarray) -> float:
    s = x.std()
    if s == 0:
        return float("nan")
    return float(np.mean((x - x.mean()) ** 4) / s**4 - 3.0)


# ---------------------------------------------------------------------------
# distribution coverage


def pca_coverage(real_rows: np.ndarray, synth_rows: np.ndarray) -> float:
    """Percent of the real distribution's 2-D PCA convex hull covered by the
    synthetic one. Axes are fitted on real data only."""
    real_rows = np.asarray(real_rows, dtype=np.float64)
    synth_rows = np.asarray(synth_rows, dtype=np.float64)
    if len(real_rows) < 3 or len(synth_rows) < 3:
        raise InsufficientData("need at least 3 points on each side")
    pca = PCA(n_components=2)
    real2 = pca.fit_transform(real_rows)
    synth2 = pca.transform(synth_rows)
    hull_real = MultiPoint(real2).convex_hull
    hull_synth = MultiPoint(synth2).convex_hull
    # an area that is vanishing relative to the first-axis spread means the
    # points are (numerically) collinear and the hull is rounding noise
    floor = 1e-10 * max(np.ptp(real2[:, 0]) ** 2, 1e-300)
    if hull_real.area <= floor or hull_synth.area <= floor:
        raise InsufficientData("degenerate (collinear) point set")
    return 100.0 * hull_real.intersection(hull_synth).area / hull_real.area


# ---------------------------------------------------------------------------
# predictive score


@dataclass
class PredictiveScoreConfig:
    lookback: int = 100
    horizon: int = 10
    hidden_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    min_train_windows: int = 64
    seed: int = 0


class _MidPredictor(nn.Module):
    """2-layer recurrent mid-price forecaster."""

    def __init__(self, n_features: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(n_features, hidden, num_layers=2, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x):
        h, _ = self.lstm(x)
        return self.head(h[:, -1, :])[:, 0]


def observation_matrix(sim: SimOutput) -> np.ndarray:
    """Per-event observation: the 6 order columns plus the level-1 book columns."""
    rows = np.array([row[:6] + row[6:10] for row in sim.rows], dtype=np.float64)
    return rows


def _windows(obs: np.ndarray, mids: np.ndarray, lookback: int, horizon: int):
    n = len(obs) - lookback - horizon + 1
    if n < 1:
        return None, None
    x = np.stack([obs[i : i + lookback] for i in range(n)])
    y = mids[np.arange(n) + lookback + horizon - 1]
    return x, y


def _fit_predictor(x, y, cfg: PredictiveScoreConfig, seed: int):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    mean, std = x.mean(axis=(0, 1)), x.std(axis=(0, 1))
    std[std == 0] = 1.0
    y_mean, y_std = y.mean(), y.std() or 1.0
    xn = (x - mean) / std
    yn = (y - y_mean) / y_std
    n_val = max(1, len(xn) // 10)
    order = rng.permutation(len(xn))
    val_idx, train_idx = order[:n_val], order[n_val:]
    model = _MidPredictor(x.shape[-1], cfg.hidden_size)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.L1Loss()
    xt = torch.tensor(xn, dtype=torch.float32)
    yt = torch.tensor(yn, dtype=torch.float32)
    best_val, best_state, bad = math.inf, None, 0
    for _ in range(cfg.max_epochs):
        model.train()
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = float(loss_fn(model(xt[val_idx]), yt[val_idx]))
        if val < best_val:
            best_val, bad = val, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, (mean, std, y_mean, y_std)


def predictive_score(
    synthetic: SimOutput,
    real_test: SimOutput,
    cfg: PredictiveScoreConfig | None = None,
    seed: int | None = None,
) -> float:
    """MAE (in raw mid-price units) of a forecaster trained on the synthetic
    log and evaluated on the real one."""
    cfg = cfg or PredictiveScoreConfig()
    seed = cfg.seed if seed is None else seed
    x_train, y_train = _windows(
        observation_matrix(synthetic), synthetic.mids(), cfg.lookback, cfg.horizon
    )
    x_test, y_test = _windows(
        observation_matrix(real_test), real_test.mids(), cfg.lookback, cfg.horizon
    )
    if x_train is None or len(x_train) < cfg.min_train_windows or x_test is None:
        raise InsufficientData("not enough rows for lookback + horizon + training")
    model, (mean, std, y_mean, y_std) = _fit_predictor(x_train, y_train, cfg, seed)
    with torch.no_grad():
        xn = torch.tensor((x_test - mean) / std, dtype=torch.float32)
        pred = model(xn).numpy() * y_std + y_mean
    return float(np.mean(np.abs(pred - y_test)))


# ---------------------------------------------------------------------------
# market impact


@dataclass
class ImpactCurve:
    bucket_times: np.ndarray  # seconds, bucket left edges
    mean: np.ndarray  # normalized mid difference per bucket, averaged over seeds
    std: np.ndarray
    per_seed: np.ndarray  # (n_seeds, n_buckets)


def _bucketed_mid(sim: SimOutput, edges: np.ndarray) -> np.ndarray:
    """Last valid mid per time bucket, forward-filled."""
    times, mids = sim.times(), sim.mids()
    valid = mids != MISSING
    times, mids = times[valid], mids[valid]
    out = np.full(len(edges) - 1, np.nan)
    idx = np.searchsorted(times, edges)
    for b in range(len(edges) - 1):
        lo, hi = idx[b], idx[b + 1]
        if hi > 0:
            out[b] = mids[hi - 1]  # most recent mid at bucket close
    # forward-fill leading gaps with the first known mid
    if np.isnan(out).any():
        first = np.flatnonzero(~np.isnan(out))
        if first.size == 0:
            raise InsufficientData("no valid mid-price observations")
        out[: first[0]] = out[first[0]]
    return out


def impact_curve(
    runs_with: list[SimOutput],
    runs_without: list[SimOutput],
    bucket_seconds: float = 60.0,
) -> ImpactCurve:
    """Normalized mid difference (with POV minus without) / without, per time
    bucket, over seed-paired runs."""
    if len(runs_with) != len(runs_without) or not runs_with:
        raise InsufficientData("need equally many seed-paired runs on both arms")
    start = min(min(r.times().min() for r in runs_with),
                min(r.times().min() for r in runs_without))
    end = max(max(r.times().max() for r in runs_with),
              max(r.times().max() for r in runs_without))
    edges = np.arange(start, end + bucket_seconds, bucket_seconds)
    per_seed = []
    for w, wo in zip(runs_with, runs_without):
        mid_w = _bucketed_mid(w, edges)
        mid_wo = _bucketed_mid(wo, edges)
        per_seed.append((mid_w - mid_wo) / mid_wo)
    per_seed = np.asarray(per_seed)
    return ImpactCurve(edges[:-1], per_seed.mean(axis=0), per_seed.std(axis=0), per_seed)
