"""Event-driven market simulation.

A run replays real (or synthetic ground-truth) orders through the matching
engine for a warm-up window, then hands order flow to the generative world
agent, which samples one order at a time conditioned on a sliding window of
recent orders and book states. Optional experimental agents (e.g. the
participation-of-volume executor) interleave by event time. Every processed
event appends one 50-column output row:

    price, size, direction, depth, offset, type,
    40 book columns (ask price, ask size, bid price, bid size x 10 levels),
    mid price, spread, order volume imbalance, session VWAP.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .book import (
    MISSING,
    TICK,
    EmptyBookSide,
    LobSnapshot,
    Order,
    OrderBook,
    OrderKind,
    Side,
    UnknownOrder,
    derived_metrics,
)
from .data import (
    TYPE_CANCEL,
    TYPE_LIMIT,
    TYPE_MARKET,
    MarketEvent,
    compute_depth,
)
from .diffusion import ddim_steps, posterior_mean_variance, sigma_squared_from_v
from .model import ModelBundle

N_COLUMNS = 50

KIND_CODE = {OrderKind.LIMIT: TYPE_LIMIT, OrderKind.CANCEL: TYPE_CANCEL, OrderKind.MARKET: TYPE_MARKET}
CODE_KIND = {v: k for k, v in KIND_CODE.items()}


class SimulationError(Exception):
    pass


@dataclass
class SimConfig:
    sim_start: float = 36_000.0  # 10:00, seconds after midnight
    sim_end: float = 43_200.0  # 12:00
    warmup_duration: float = 900.0  # replayed real orders before generation starts
    seed: int = 0
    sampler: str = "ddpm"  # or "ddim"
    ddim_sampling_steps: int = 1
    max_regen_retries: int = 5
    delta_min: float = 1e-5  # 10 microseconds; floor for generated time offsets
    levels: int = 10
    # hard cap on logged events; a degenerate generator whose offsets all clamp
    # to delta_min would otherwise turn a fixed time span into millions of calls
    max_events: int = 1_000_000


@dataclass
class POVConfig:
    participation: float = 0.1
    wakeup_interval: float = 60.0  # seconds
    side: Side = Side.BUY
    target_shares: int = 100_000
    window_start: float = 35_100.0  # 09:45
    window_end: float = 37_800.0  # 10:30


@dataclass
class GeneratedOrder:
    """Raw model output in normalized space plus its post-processed order."""

    raw: np.ndarray  # K_o vector
    offset: float
    order: Order | None  # None when rejected
    reject_reason: str | None = None


@dataclass
class SimOutput:
    rows: list  # 50-value tuples
    config: SimConfig
    n_model_calls: int = 0
    n_generated: int = 0
    n_rejected: int = 0
    n_skipped: int = 0
    truncated: bool = False  # hit the max_events cap before sim_end
    event_times: list = field(default_factory=list)  # seconds, parallel to rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            for row in self.rows:
                writer.writerow([_fmt(v) for v in row])

    def manifest(self, extra=None) -> dict:
        blob = {"config": _config_dict(self.config), "rows": len(self.rows),
                "model_calls": self.n_model_calls, "generated": self.n_generated,
                "rejected": self.n_rejected, "skipped": self.n_skipped,
                "truncated": self.truncated}
        if extra:
            blob.update(extra)
        return blob

    def column(self, i: int) -> np.ndarray:
        return np.array([row[i] for row in self.rows], dtype=np.float64)

    def mids(self) -> np.ndarray:
        return self.column(N_COLUMNS - 4)

    def times(self) -> np.ndarray:
        return np.asarray(self.event_times, dtype=np.float64)

    def lob_block(self) -> np.ndarray:
        return np.array([row[6:46] for row in self.rows], dtype=np.int64)


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, Side):
            d[k] = v.value
    return d


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9f}"


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class MarketState:
    """Sliding conditioning window over normalized orders and book states."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        n = bundle.config.window
        self.orders = deque(maxlen=n - 1)  # (features5, type_code) normalized
        self.lob = deque(maxlen=n)  # normalized 4L rows
        stats = bundle.stats
        self._order_mean = stats.order_scaler.mean_
        self._order_std = stats.order_scaler.std_

    def push(self, features_raw: np.ndarray, type_code: int, lob_row_raw: np.ndarray) -> None:
        norm = (features_raw - self._order_mean) / self._order_std
        stats = self.bundle.stats
        lob_norm = stats.lob_scaler.transform(lob_row_raw[None, :])[0]
        lob_norm[lob_row_raw == MISSING] = 0.0
        self.orders.append((norm, type_code))
        self.lob.append(lob_norm)

    def seed_lob(self, lob_row_raw: np.ndarray) -> None:
        """Push a book state without an accompanying order (pre-window state)."""
        stats = self.bundle.stats
        lob_norm = stats.lob_scaler.transform(lob_row_raw[None, :])[0]
        lob_norm[lob_row_raw == MISSING] = 0.0
        self.lob.append(lob_norm)

    @property
    def filled(self) -> bool:
        n = self.bundle.config.window
        return len(self.orders) == n - 1 and len(self.lob) == n

    def tensors(self):
        cond_f = torch.tensor(np.stack([o[0] for o in self.orders])[None], dtype=torch.float32)
        cond_t = torch.tensor(np.array([o[1] for o in self.orders])[None], dtype=torch.long)
        lob = torch.tensor(np.stack(self.lob)[None], dtype=torch.float32)
        return cond_f, cond_t, lob


class WorldAgent:
    """Generative world agent: samples one order per wake-up."""

    X0_CLAMP = 5.0  # z-score units

    def __init__(self, bundle: ModelBundle, config: SimConfig):
        self.bundle = bundle
        self.config = config
        self.gen = torch.Generator().manual_seed(config.seed)
        self.n_model_calls = 0

    def _sample_x0(self, state: MarketState) -> np.ndarray:
        cond_f, cond_t, lob = state.tensors()
        model = self.bundle.model
        schedule = self.bundle.schedule
        k = self.bundle.config.order_dim
        x = torch.randn((1, 1, k), generator=self.gen)
        with torch.no_grad():
            if self.config.sampler == "ddim":
                ts = ddim_steps(schedule.T, self.config.ddim_sampling_steps)
                for i, t in enumerate(ts):
                    t_prev = ts[i + 1] if i + 1 < len(ts) else 0
                    eps_hat, _ = model(cond_f, cond_t, lob, x, torch.tensor([t]))
                    self.n_model_calls += 1
                    abar = schedule.alpha_bar(t)
                    abar_prev = schedule.alpha_bar(t_prev)
                    x0_hat = (x - (1 - abar) ** 0.5 * eps_hat) / abar**0.5
                    # static thresholding: x0 lives in z-score space, so clamp
                    # the prediction to a generous band; keeps the few-step
                    # sampler stable where 1/sqrt(abar) amplifies eps error
                    x0_hat = x0_hat.clamp(-self.X0_CLAMP, self.X0_CLAMP)
                    x = abar_prev**0.5 * x0_hat + (1 - abar_prev) ** 0.5 * eps_hat
            else:
                for t in range(schedule.T, 0, -1):
                    eps_hat, v = model(cond_f, cond_t, lob, x, torch.tensor([t]))
                    self.n_model_calls += 1
                    z = (
                        torch.randn(x.shape, generator=self.gen)
                        if t > 1
                        else torch.zeros_like(x)
                    )
                    # clipped-denoised step: clamp the implied x0 so imperfect
                    # noise predictions cannot compound into runaway samples
                    abar = schedule.alpha_bar(t)
                    x0_hat = (x - (1 - abar) ** 0.5 * eps_hat) / abar**0.5
                    x0_hat = x0_hat.clamp(-self.X0_CLAMP, self.X0_CLAMP)
                    mean, _ = posterior_mean_variance(x0_hat, x, t, schedule)
                    x = mean + (sigma_squared_from_v(v, t, schedule) ** 0.5) * z
        x = x.clamp(-self.X0_CLAMP, self.X0_CLAMP)
        return x[0, 0].numpy().astype(np.float64)

    def generate(self, state: MarketState, book: OrderBook, time_s: float,
                 next_order_id: int) -> GeneratedOrder:
        raw = self._sample_x0(state)
        return post_process(
            raw, book, self.bundle, time_s, next_order_id,
            delta_min=self.config.delta_min, levels=self.config.levels,
        )


def post_process(raw: np.ndarray, book: OrderBook, bundle: ModelBundle,
                 time_s: float, order_id: int, delta_min: float = 1e-5,
                 levels: int = 10) -> GeneratedOrder:
    """Turn a raw generated vector into a valid order, or a reject.

    Continuous features are denormalized with the training stats; direction is
    discretized by sign, the order type by the nearest type-embedding row.
    Limit prices are placed `depth` ticks behind the same-side best.
    """
    stats = bundle.stats
    cont = stats.order_scaler.inverse_transform(raw[None, :5])[0]
    offset, size_f, depth_f, direction, _price = cont
    offset = max(float(offset), delta_min)
    size = int(round(size_f))
    depth = int(round(depth_f))
    side = Side.BUY if direction > 0 else Side.SELL
    table = bundle.model.type_embedding.weight.detach().numpy()
    type_code = int(np.argmin(np.linalg.norm(table - raw[5:], axis=1)))
    kind = CODE_KIND[type_code]

    if size <= 0:
        return GeneratedOrder(raw, offset, None, "non-positive size")

    t_ns = int(round(time_s * 1e9))
    if kind is OrderKind.LIMIT:
        best = book.best_bid() if side is Side.BUY else book.best_ask()
        if best is None:
            return GeneratedOrder(raw, offset, None, "no same-side best")
        price = best - depth * TICK if side is Side.BUY else best + depth * TICK
        if price <= 0:
            return GeneratedOrder(raw, offset, None, "non-positive price")
        band = _band_limit(book, side, levels)
        if band is not None and (price < band if side is Side.BUY else price > band):
            return GeneratedOrder(raw, offset, None, "depth beyond first levels")
        return GeneratedOrder(raw, offset, Order(order_id, t_ns, kind, side, price, size))
    if kind is OrderKind.MARKET:
        if (book.asks if side is Side.BUY else book.bids).is_empty:
            return GeneratedOrder(raw, offset, None, "empty opposite side")
        return GeneratedOrder(raw, offset, Order(order_id, t_ns, kind, side, 0, size))
    # cancel: resolve to the resting order with the closest (depth, size)
    match = _closest_resting(book, side, depth, size)
    if match is None:
        return GeneratedOrder(raw, offset, None, "no resting order to cancel")
    match_id, match_price, match_size = match
    order = Order(match_id, t_ns, OrderKind.CANCEL, side, match_price, match_size)
    return GeneratedOrder(raw, offset, order)


def _band_limit(book: OrderBook, side: Side, levels: int) -> int | None:
    """Price of the worst top-`levels` same-side level, if the book is that deep."""
    prices = (book.bids if side is Side.BUY else book.asks).prices_by_priority()
    if len(prices) < levels:
        return None
    return prices[levels - 1]


def _closest_resting(book: OrderBook, side: Side, depth: int, size: int):
    best = book.best_bid() if side is Side.BUY else book.best_ask()
    if best is None:
        return None
    best_match, best_dist = None, float("inf")
    for oid, price, rsize in book.iter_resting(side):
        rdepth = (best - price) // TICK if side is Side.BUY else (price - best) // TICK
        dist = (rdepth - depth) ** 2 + ((rsize - size) / 100.0) ** 2
        if dist < best_dist:
            best_match, best_dist = (oid, price, rsize), dist
    return best_match


class POVAgent:
    """Participation-of-volume executor: transacts a fixed fraction of recent
    market volume each wake-up until the share target is met."""

    def __init__(self, config: POVConfig):
        self.config = config
        self.transacted = 0
        self._volume_mark = 0  # trade-log volume at last wake-up

    def wakeup_times(self) -> np.ndarray:
        c = self.config
        return np.arange(c.window_start, c.window_end, c.wakeup_interval)

    @property
    def done(self) -> bool:
        return self.transacted >= self.config.target_shares

    def step(self, book: OrderBook, time_s: float, next_order_id: int) -> Order | None:
        """Marketable limit at the opposite best for participation * V_t shares;
        the unfilled remainder is cancelled immediately."""
        total_volume = sum(t.size for t in book.trade_log)
        v_t = total_volume - self._volume_mark
        self._volume_mark = total_volume
        if self.done or v_t <= 0:
            return None
        size = int(self.config.participation * v_t)
        size = min(size, self.config.target_shares - self.transacted)
        if size <= 0:
            return None
        side = self.config.side
        opposite_best = book.best_ask() if side is Side.BUY else book.best_bid()
        if opposite_best is None:
            return None
        return Order(next_order_id, int(round(time_s * 1e9)), OrderKind.LIMIT, side,
                     opposite_best, size)


def run_simulation(
    config: SimConfig,
    events: list[MarketEvent],
    bundle: ModelBundle | None = None,
    pov: POVAgent | None = None,
    replay_only: bool = False,
) -> SimOutput:
    """Run one session. `events` is the historical stream (used for warm-up, and
    for the whole session when replay_only). A bundle is required unless
    replay_only is set."""
    if not replay_only and bundle is None:
        raise SimulationError("generative simulation requires a model checkpoint")
    torch.manual_seed(config.seed)

    book = OrderBook()
    rows: list = []
    times: list = []
    output = SimOutput(rows, config, event_times=times)
    state = MarketState(bundle) if bundle is not None else None
    world = WorldAgent(bundle, config) if (bundle is not None and not replay_only) else None

    warmup_end = config.sim_start + config.warmup_duration
    replay_until = config.sim_end if replay_only else warmup_end
    replay = [e for e in events if e.time <= replay_until]
    if not replay_only and not replay:
        raise SimulationError("no historical events available for warm-up")

    if state is not None:
        state.seed_lob(np.asarray(book.snapshot(config.levels).to_row(), dtype=np.float64))

    pov_times = list(pov.wakeup_times()) if pov is not None else []
    next_synthetic_id = 20_000_000_000
    prev_time = None

    def append_row(time_s, kind, side, price, size, depth, offset):
        snap = book.snapshot(config.levels)
        metrics = derived_metrics(snap, book.trade_log)
        row = (
            price, size, side.value, depth, offset, KIND_CODE[kind],
            *snap.to_row(),
            metrics.mid_price, metrics.spread, metrics.order_volume_imbalance, metrics.vwap,
        )
        rows.append(row)
        times.append(time_s)
        if state is not None:
            feats = np.array([offset, size, depth, side.value, price], dtype=np.float64)
            state.push(feats, KIND_CODE[kind], np.asarray(snap.to_row(), dtype=np.float64))

    def process_replay(ev: MarketEvent) -> None:
        nonlocal prev_time, next_synthetic_id
        depth = compute_depth(ev.kind, ev.side, ev.price, book)
        t_ns = int(round(ev.time * 1e9))
        price = ev.price
        if ev.kind is OrderKind.LIMIT:
            book.submit_limit(Order(ev.order_id, t_ns, ev.kind, ev.side, ev.price, ev.size))
        elif ev.kind is OrderKind.CANCEL:
            try:
                book.cancel(ev.order_id, size=ev.size)
            except UnknownOrder:
                return  # referenced order diverged (e.g. consumed by an agent)
            except Exception:
                return
        else:
            next_synthetic_id += 1
            try:
                trades = book.submit_market(
                    Order(next_synthetic_id, t_ns, ev.kind, ev.side, 0, ev.size)
                )
                price = trades[-1].price if trades else MISSING
            except EmptyBookSide:
                return
        offset = 0.0 if prev_time is None else ev.time - prev_time
        prev_time = ev.time
        append_row(ev.time, ev.kind, ev.side, price, ev.size, depth, offset)

    def process_pov(time_s: float) -> None:
        nonlocal prev_time, next_synthetic_id
        next_synthetic_id += 1
        order = pov.step(book, time_s, next_synthetic_id)
        if order is None:
            return
        depth = compute_depth(order.kind, order.side, order.price, book)
        trades = book.submit_limit(order)
        filled = sum(t.size for t in trades)
        pov.transacted += filled
        if filled < order.size:  # cancel the unfilled remainder (IOC behavior)
            try:
                book.cancel(order.id)
            except UnknownOrder:
                pass
        offset = 0.0 if prev_time is None else time_s - prev_time
        prev_time = time_s
        append_row(time_s, order.kind, order.side, order.price, order.size, depth, offset)

    def process_world(time_s: float) -> float | None:
        """Generate and apply one order; returns the scheduled next wake-up time."""
        nonlocal prev_time, next_synthetic_id
        generated = None
        for _ in range(config.max_regen_retries + 1):
            next_synthetic_id += 1
            candidate = world.generate(state, book, time_s, next_synthetic_id)
            output.n_generated += 1
            if candidate.order is not None:
                generated = candidate
                break
            output.n_rejected += 1
        if generated is None:
            output.n_skipped += 1
            return time_s + config.delta_min
        order = generated.order
        depth = compute_depth(order.kind, order.side, order.price, book)
        price = order.price
        if order.kind is OrderKind.LIMIT:
            book.submit_limit(order)
        elif order.kind is OrderKind.CANCEL:
            try:
                book.cancel(order.id)
            except UnknownOrder:
                output.n_skipped += 1
                return time_s + max(generated.offset, config.delta_min)
        else:
            try:
                trades = book.submit_market(order)
                price = trades[-1].price if trades else MISSING
            except EmptyBookSide:
                output.n_skipped += 1
                return time_s + max(generated.offset, config.delta_min)
        offset = 0.0 if prev_time is None else time_s - prev_time
        prev_time = time_s
        append_row(time_s, order.kind, order.side, price, order.size, depth, offset)
        return time_s + max(generated.offset, config.delta_min)

    # event loop: replay stream, POV wake-ups, and the world agent merged by time
    replay_i = 0
    pov_i = 0
    world_next = None  # scheduled time of the next generated order
    while True:
        t_replay = replay[replay_i].time if replay_i < len(replay) else None
        t_pov = pov_times[pov_i] if pov_i < len(pov_times) else None
        t_world = world_next
        candidates = [(t, tag) for t, tag in ((t_replay, 0), (t_pov, 1), (t_world, 2))
                      if t is not None]
        if not candidates:
            break
        t, tag = min(candidates)
        if t > config.sim_end:
            break
        if len(rows) + output.n_skipped >= config.max_events:
            output.truncated = True
            break
        if tag == 0:
            process_replay(replay[replay_i])
            replay_i += 1
            # hand off to the world agent once warm-up is exhausted
            if (world is not None and world_next is None
                    and (replay_i == len(replay) or replay[replay_i].time > warmup_end)):
                if not state.filled:
                    raise SimulationError(
                        "warm-up too short to fill the conditioning window"
                    )
                world_next = max(t, warmup_end)
        elif tag == 1:
            if pov.done:
                pov_i = len(pov_times)
            else:
                process_pov(t)
                pov_i += 1
        else:
            world_next = process_world(t)

    output.n_model_calls = world.n_model_calls if world is not None else 0
    return output


def write_run(output: SimOutput, out_dir, name: str, manifest_extra=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    output.to_csv(out_dir / f"{name}.csv")
    (out_dir / f"{name}_manifest.json").write_text(
        json.dumps(output.manifest(manifest_extra), indent=2, sort_keys=True)
    )
