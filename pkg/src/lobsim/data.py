"""LOBSTER-style file parsing, feature engineering, normalization, and windowing.

Message files are 6-column CSVs (time, event_type, order_id, size, price,
direction) with no header; orderbook files carry 4*L columns per row
(ask price, ask size, bid price, bid size for levels 1..L).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .book import MISSING, TICK, EmptyBookSide, Order, OrderBook, OrderKind, Side, UnknownOrder

# LOBSTER event type codes
EVT_NEW_LIMIT = 1
EVT_PARTIAL_CANCEL = 2
EVT_DELETE = 3
EVT_EXECUTE_VISIBLE = 4
EVT_EXECUTE_HIDDEN = 5

# Order class codes for the type feature / embedding table
TYPE_LIMIT = 0
TYPE_CANCEL = 1
TYPE_MARKET = 2

# Column layout of the continuous order feature block
FEATURE_NAMES = ("offset", "size", "depth", "direction", "price")
N_CONTINUOUS = len(FEATURE_NAMES)
WINDOW_SIZE = 256


class ParseError(Exception):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class DegenerateFeature(Exception):
    """A feature has zero variance on the training split; z-scoring is undefined."""


@dataclass
class RawMessage:
    time: float  # seconds after midnight
    event_type: int
    order_id: int
    size: int
    price: int
    direction: int  # -1 sell, +1 buy


@dataclass
class MarketEvent:
    """A kept, classified event ready for replay: limit / cancel / market."""

    time: float
    kind: OrderKind
    side: Side
    price: int
    size: int
    order_id: int


def parse_message_file(path) -> list[RawMessage]:
    messages = []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(path, line_no, f"expected 6 columns, got {len(row)}")
            try:
                msg = RawMessage(
                    time=float(row[0]),
                    event_type=int(row[1]),
                    order_id=int(row[2]),
                    size=int(row[3]),
                    price=int(row[4]),
                    direction=int(row[5]),
                )
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            messages.append(msg)
    return messages


def parse_orderbook_file(path, levels: int = 10) -> np.ndarray:
    rows = []
    expected = 4 * levels
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != expected:
                raise ParseError(path, line_no, f"expected {expected} columns, got {len(row)}")
            try:
                rows.append([int(v) for v in row])
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
    return np.asarray(rows, dtype=np.int64)


def filter_events(messages: list[RawMessage]) -> list[MarketEvent]:
    """Keep limit adds, cancellations, and visible executions.

    Deletions and partial cancels map to cancel orders; a visible execution of
    a resting order is re-expressed as a market order on the aggressor side
    (opposite of the resting order's direction). Hidden executions and other
    event codes are dropped.
    """
    events = []
    for m in messages:
        side = Side.BUY if m.direction > 0 else Side.SELL
        if m.event_type == EVT_NEW_LIMIT:
            events.append(MarketEvent(m.time, OrderKind.LIMIT, side, m.price, m.size, m.order_id))
        elif m.event_type in (EVT_DELETE, EVT_PARTIAL_CANCEL):
            events.append(MarketEvent(m.time, OrderKind.CANCEL, side, m.price, m.size, m.order_id))
        elif m.event_type == EVT_EXECUTE_VISIBLE:
            events.append(
                MarketEvent(m.time, OrderKind.MARKET, side.opposite, m.price, m.size, m.order_id)
            )
    return events


def compute_depth(kind: OrderKind, side: Side, price: int, book: OrderBook) -> int:
    """Signed tick distance of an order's price from the same-side best.

    Positive values sit behind the best (deeper in the book); negative values
    are inside the spread or crossing. Zero when the same-side best is absent.
    """
    best = book.best_bid() if side is Side.BUY else book.best_ask()
    if best is None:
        return 0
    if side is Side.BUY:
        return (best - price) // TICK
    return (price - best) // TICK


class FeatureScaler:
    """Per-column z-score normalizer with population statistics.

    fit() must only see the training split; transform/inverse_transform are
    exact inverses of each other.
    """

    def __init__(self):
        self.mean_: np.ndarray | None = None
        self.std_: np.ndarray | None = None

    def fit(self, values: np.ndarray) -> "FeatureScaler":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.mean_ = values.mean(axis=0)
        self.std_ = values.std(axis=0)  # population std
        bad = np.flatnonzero(self.std_ == 0)
        if bad.size:
            raise DegenerateFeature(f"zero-variance feature column(s): {bad.tolist()}")
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean_) / self.std_

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std_ + self.mean_

    def fit_transform(self, values: np.ndarray) -> np.ndarray:
        return self.fit(values).transform(values)

    def get_params(self) -> dict:
        return {"mean": self.mean_.tolist(), "std": self.std_.tolist()}

    @classmethod
    def from_params(cls, params: dict) -> "FeatureScaler":
        scaler = cls()
        scaler.mean_ = np.asarray(params["mean"], dtype=np.float64)
        scaler.std_ = np.asarray(params["std"], dtype=np.float64)
        return scaler


@dataclass
class NormStats:
    """Persisted normalization state: order features and LOB columns."""

    order_scaler: FeatureScaler
    lob_scaler: FeatureScaler
    version: int = 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "order": self.order_scaler.get_params(),
                "lob": self.lob_scaler.get_params(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        blob = json.loads(text)
        return cls(
            order_scaler=FeatureScaler.from_params(blob["order"]),
            lob_scaler=FeatureScaler.from_params(blob["lob"]),
            version=blob["version"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def replay_events(events: list[MarketEvent], levels: int = 10):
    """Feed events through a fresh book; yields (event, depth, lob_row_after).

    Cancels that reference unknown ids (e.g. executions of pre-session orders)
    are skipped. Depth is measured against the book state immediately before
    the event.
    """
    book = OrderBook()
    next_id = 10_000_000_000  # synthetic ids for market orders, clear of real ones
    for ev in events:
        depth = compute_depth(ev.kind, ev.side, ev.price, book)
        t_ns = int(round(ev.time * 1e9))
        if ev.kind is OrderKind.LIMIT:
            book.submit_limit(Order(ev.order_id, t_ns, ev.kind, ev.side, ev.price, ev.size))
        elif ev.kind is OrderKind.CANCEL:
            try:
                book.cancel(ev.order_id, size=ev.size)
            except UnknownOrder:
                continue
        else:  # market
            next_id += 1
            try:
                book.submit_market(Order(next_id, t_ns, ev.kind, ev.side, 0, ev.size))
            except EmptyBookSide:
                continue
        yield ev, depth, book.snapshot(levels).to_row()


def build_feature_arrays(events: list[MarketEvent], levels: int = 10):
    """Raw (unnormalized) feature matrices for a session.

    Returns (features, type_idx, lob) where features is n x 5 continuous
    columns in FEATURE_NAMES order, type_idx is the n-vector of order class
    codes, and lob is (n+1) x 4L book states: row 0 is the pre-session state
    and row i+1 the state right after event i.
    """
    feats, types, lob = [], [], [[MISSING] * (4 * levels)]
    prev_time = None
    kind_code = {OrderKind.LIMIT: TYPE_LIMIT, OrderKind.CANCEL: TYPE_CANCEL, OrderKind.MARKET: TYPE_MARKET}
    for ev, depth, lob_row in replay_events(events, levels):
        offset = 0.0 if prev_time is None else ev.time - prev_time
        prev_time = ev.time
        feats.append([offset, ev.size, depth, ev.side.value, ev.price])
        types.append(kind_code[ev.kind])
        lob.append(lob_row)
    return (
        np.asarray(feats, dtype=np.float64),
        np.asarray(types, dtype=np.int64),
        np.asarray(lob, dtype=np.float64),
    )


def fit_norm_stats(features: np.ndarray, lob: np.ndarray) -> NormStats:
    """Fit z-score stats on the training split.

    Direction (column 3) is passed through raw: its scaler entry is pinned to
    mean 0 / std 1. LOB sentinel entries are masked out of the statistics.
    """
    order_scaler = FeatureScaler().fit(features)
    order_scaler.mean_[3] = 0.0
    order_scaler.std_[3] = 1.0
    lob_scaler = FeatureScaler()
    masked = np.where(lob == MISSING, np.nan, lob)
    with warnings.catch_warnings():
        # columns that are missing in every row reduce over an empty slice
        warnings.simplefilter("ignore", RuntimeWarning)
        lob_scaler.mean_ = np.nan_to_num(np.nanmean(masked, axis=0))
        lob_scaler.std_ = np.nan_to_num(np.nanstd(masked, axis=0), nan=1.0)
    # deep levels can hold one constant value all session; center them to 0
    lob_scaler.std_[lob_scaler.std_ == 0] = 1.0
    return NormStats(order_scaler, lob_scaler)


def normalize_lob(lob: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score LOB rows; sentinel (missing) entries map to 0 in normalized space."""
    out = stats.lob_scaler.transform(lob)
    out[lob == MISSING] = 0.0
    return out


@dataclass
class WindowDataset:
    """Normalized, windowable session data.

    features: n x 5 z-scored continuous columns; type_idx: n; lob: (n+1) x 4L
    z-scored book states aligned so that window i conditions on lob rows
    [i, i+N) = states after events i-1 .. i+N-2 (row 0 being pre-session).
    """

    features: np.ndarray
    type_idx: np.ndarray
    lob: np.ndarray
    stats: NormStats
    window: int = WINDOW_SIZE

    def __len__(self) -> int:
        return max(0, len(self.features) - self.window + 1)

    def get(self, i: int):
        """(cond_features, cond_types, lob_block, target_features, target_type)."""
        n = self.window
        return (
            self.features[i : i + n - 1],
            self.type_idx[i : i + n - 1],
            self.lob[i : i + n],
            self.features[i + n - 1],
            self.type_idx[i + n - 1],
        )

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            features=self.features,
            type_idx=self.type_idx,
            lob=self.lob,
            window=self.window,
            stats=np.frombuffer(self.stats.to_json().encode(), dtype=np.uint8),
        )

    @classmethod
    def load(cls, path) -> "WindowDataset":
        blob = np.load(path)
        stats = NormStats.from_json(bytes(blob["stats"]).decode())
        return cls(
            features=blob["features"],
            type_idx=blob["type_idx"],
            lob=blob["lob"],
            stats=stats,
            window=int(blob["window"]),
        )


def train_val_split(
    events: list[MarketEvent],
    window: int = WINDOW_SIZE,
    train_fraction: float = 0.85,
    levels: int = 10,
) -> tuple["WindowDataset", "WindowDataset"]:
    """Replay a session once and split it into train/validation windows.

    Normalization statistics come from the training rows only. The validation
    view starts window-1 rows before the boundary so its first target is the
    first post-boundary event; replaying the tail from a cold book instead
    would drop every cancel of a pre-boundary order and skew the split.
    """
    features, type_idx, lob = build_feature_arrays(events, levels)
    n = int(len(features) * train_fraction)
    if n < window or len(features) - n < 1:
        raise ValueError("session too short for the requested split")
    stats = fit_norm_stats(features[:n], lob[: n + 1])
    feats_n = stats.order_scaler.transform(features)
    lob_n = normalize_lob(lob, stats)
    train_ds = WindowDataset(feats_n[:n], type_idx[:n], lob_n[: n + 1], stats, window)
    k = n - window + 1
    val_ds = WindowDataset(feats_n[k:], type_idx[k:], lob_n[k:], stats, window)
    return train_ds, val_ds


def make_dataset(
    events: list[MarketEvent],
    stats: NormStats | None = None,
    window: int = WINDOW_SIZE,
    levels: int = 10,
) -> WindowDataset:
    """Replay a session and build the normalized windowed dataset.

    When stats is None (training split), the z-score statistics are fitted on
    this session's rows; otherwise the supplied stats are applied as-is.
    """
    features, type_idx, lob = build_feature_arrays(events, levels)
    if stats is None:
        stats = fit_norm_stats(features, lob)
    return WindowDataset(
        features=stats.order_scaler.transform(features),
        type_idx=type_idx,
        lob=normalize_lob(lob, stats),
        stats=stats,
        window=window,
    )
