"""Synthetic market session generator.

Produces internally consistent LOBSTER-format message/orderbook file pairs by
driving a real matching engine with a stochastic order stream anchored to a
drifting reference price. Used for ground-truth replay checks and as desk-scale
training data with known feature statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .book import TICK, EmptyBookSide, Order, OrderBook, OrderKind, Side
from .data import EVT_DELETE, EVT_EXECUTE_VISIBLE, EVT_NEW_LIMIT


@dataclass
class SyntheticConfig:
    start_time: float = 34_200.0  # 09:30 in seconds after midnight
    n_events: int = 20_000
    seed: int = 0
    initial_price: int = 100_0000  # 100.00 in 1e-4 currency units
    # event mix (before feasibility constraints)
    p_limit: float = 0.60
    p_cancel: float = 0.28
    p_buy: float = 0.75
    # inter-arrival gamma (seconds): mean = shape * scale
    offset_shape: float = 4.0
    offset_scale: float = 0.05
    # order size gamma (shares)
    size_shape: float = 9.0
    size_scale: float = 33.0
    max_depth_ticks: int = 8
    drift_prob: float = 0.25  # chance the reference price moves one tick per event
    drift_bound_ticks: int = 10  # reference walk reflects at +/- this many ticks


def _draw_size(rng, cfg) -> int:
    return max(1, int(round(rng.gamma(cfg.size_shape, cfg.size_scale))))


def generate_session(cfg: SyntheticConfig):
    """Returns (message_rows, orderbook_rows) as lists of value tuples.

    Message rows follow the 6-column layout (time, type, order id, size,
    price, direction); orderbook rows are the 40-column top-10 book state
    after each message.
    """
    rng = np.random.default_rng(cfg.seed)
    book = OrderBook()
    messages, lob_rows = [], []
    time = cfg.start_time
    ref = cfg.initial_price
    next_id = 1
    resting_ids: list[int] = []

    def record(row):
        messages.append(row)
        lob_rows.append(tuple(book.snapshot(10).to_row()))

    for _ in range(cfg.n_events):
        time += rng.gamma(cfg.offset_shape, cfg.offset_scale)
        if rng.random() < cfg.drift_prob:
            ref += TICK * int(rng.choice([-1, 1]))
            bound = cfg.drift_bound_ticks * TICK
            if abs(ref - cfg.initial_price) > bound:
                ref = cfg.initial_price + int(np.sign(ref - cfg.initial_price)) * bound
        t_ns = int(round(time * 1e9))

        u = rng.random()
        if u < cfg.p_limit or len(resting_ids) < 20:
            kind = OrderKind.LIMIT
        elif u < cfg.p_limit + cfg.p_cancel:
            kind = OrderKind.CANCEL
        else:
            kind = OrderKind.MARKET

        side = Side.BUY if rng.random() < cfg.p_buy else Side.SELL
        if kind is OrderKind.LIMIT:
            depth = int(rng.integers(0, cfg.max_depth_ticks + 1))
            half_spread = TICK
            if side is Side.BUY:
                price = ref - half_spread - depth * TICK
            else:
                price = ref + half_spread + depth * TICK
            oid = next_id
            next_id += 1
            size = _draw_size(rng, cfg)
            book.submit_limit(Order(oid, t_ns, kind, side, price, size))
            try:
                book.resting_order(oid)
                resting_ids.append(oid)
            except Exception:
                pass  # fully crossed; nothing rests
            record((time, EVT_NEW_LIMIT, oid, size, price, side.value))
        elif kind is OrderKind.CANCEL:
            oid = int(resting_ids[rng.integers(0, len(resting_ids))])
            try:
                r_side, r_price, r_size = book.resting_order(oid)
            except Exception:
                resting_ids.remove(oid)
                continue
            book.cancel(oid)
            resting_ids.remove(oid)
            record((time, EVT_DELETE, oid, r_size, r_price, r_side.value))
        else:
            opposite = book.asks if side is Side.BUY else book.bids
            if opposite.is_empty:
                continue
            best = opposite.best_price()
            front = opposite.level_queue(best)[0]
            size = min(_draw_size(rng, cfg), front.size)
            maker_side = side.opposite
            trades = book.submit_market(
                Order(next_id, t_ns, OrderKind.MARKET, side, 0, size)
            )
            next_id += 1
            assert len(trades) == 1  # sized to the front of the queue
            tr = trades[0]
            if tr.size == front.size:
                # the resting order is gone; forget its id
                try:
                    resting_ids.remove(front.id)
                except ValueError:
                    pass
            record((time, EVT_EXECUTE_VISIBLE, front.id, tr.size, tr.price, maker_side.value))

    return messages, lob_rows


def write_session(directory, cfg: SyntheticConfig, stem: str = "synthetic"):
    """Generate a session and write LOBSTER-style message/orderbook CSVs.

    Returns (message_path, orderbook_path).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    messages, lob_rows = generate_session(cfg)
    msg_path = directory / f"{stem}_message.csv"
    lob_path = directory / f"{stem}_orderbook.csv"
    with open(msg_path, "w", newline="") as f:
        writer = csv.writer(f)
        for time, evt, oid, size, price, direction in messages:
            writer.writerow([f"{time:.9f}", evt, oid, size, price, direction])
    with open(lob_path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in lob_rows:
            writer.writerow(row)
    return msg_path, lob_path
