"""Price-time-priority limit order book with continuous double auction matching.

Prices are integers in units of 1e-4 currency (LOBSTER convention); one tick
is 100 units (one cent). Sizes are integer shares. Keeping everything integer
makes matching exact and snapshots byte-stable.
"""

from __future__ import annotations

import enum
from bisect import bisect_left, insort
from collections import deque
from dataclasses import dataclass, field

TICK = 100  # price units per tick
PRICE_UNITS_PER_CURRENCY = 10_000
MISSING = -1  # sentinel for empty snapshot levels / undefined metrics


class OrderKind(enum.Enum):
    LIMIT = "limit"
    CANCEL = "cancel"
    MARKET = "market"


class Side(enum.Enum):
    BUY = 1
    SELL = -1

    @property
    def opposite(self) -> "Side":
        return Side.SELL if self is Side.BUY else Side.BUY


class EmptyBookSide(Exception):
    """Market order arrived with nothing resting on the opposite side."""


class UnknownOrder(Exception):
    """Cancel referenced an order id that is not resting in the book."""


class OneSidedBook(Exception):
    """Mid-price/spread requested while one side of the book is empty."""


@dataclass
class Order:
    id: int
    time: int  # nanoseconds since session start
    kind: OrderKind
    side: Side
    price: int  # ignored for market orders
    size: int


@dataclass
class Trade:
    time: int
    price: int  # maker (resting order) price
    size: int
    aggressor_side: Side


@dataclass
class _Resting:
    id: int
    time: int
    size: int


class BookSide:
    """One side of the book: price levels in priority order, FIFO within level."""

    def __init__(self, side: Side):
        self.side = side
        self._levels: dict[int, deque[_Resting]] = {}
        # ascending price list; best is last for bids, first for asks
        self._prices: list[int] = []

    def __len__(self) -> int:
        return sum(len(q) for q in self._levels.values())

    @property
    def is_empty(self) -> bool:
        return not self._prices

    def best_price(self) -> int | None:
        if not self._prices:
            return None
        return self._prices[-1] if self.side is Side.BUY else self._prices[0]

    def prices_by_priority(self) -> list[int]:
        return list(reversed(self._prices)) if self.side is Side.BUY else list(self._prices)

    def level_size(self, price: int) -> int:
        return sum(o.size for o in self._levels.get(price, ()))

    def level_queue(self, price: int) -> deque[_Resting]:
        return self._levels[price]

    def add(self, price: int, resting: _Resting) -> None:
        if price not in self._levels:
            self._levels[price] = deque()
            insort(self._prices, price)
        self._levels[price].append(resting)

    def remove_level_if_empty(self, price: int) -> None:
        if price in self._levels and not self._levels[price]:
            del self._levels[price]
            idx = bisect_left(self._prices, price)
            self._prices.pop(idx)

    def iter_resting(self):
        for price in self.prices_by_priority():
            for order in self._levels[price]:
                yield price, order


@dataclass
class LobSnapshot:
    """Top-L book state: per level, ask price/size and bid price/size.

    Empty levels carry the MISSING sentinel in all four fields.
    """

    ask_price: list[int]
    ask_size: list[int]
    bid_price: list[int]
    bid_size: list[int]

    @property
    def depth(self) -> int:
        return len(self.ask_price)

    def to_row(self) -> list[int]:
        """Interleave as (ask_p, ask_v, bid_p, bid_v) per level, LOBSTER-style."""
        row = []
        for i in range(self.depth):
            row += [self.ask_price[i], self.ask_size[i], self.bid_price[i], self.bid_size[i]]
        return row

    def best_bid(self) -> int | None:
        return None if self.bid_price[0] == MISSING else self.bid_price[0]

    def best_ask(self) -> int | None:
        return None if self.ask_price[0] == MISSING else self.ask_price[0]


class OrderBook:
    """Limit order book for a single instrument, single-writer."""

    def __init__(self):
        self.bids = BookSide(Side.BUY)
        self.asks = BookSide(Side.SELL)
        self.trade_log: list[Trade] = []
        self._index: dict[int, tuple[Side, int]] = {}  # id -> (side, price)

    def _side(self, side: Side) -> BookSide:
        return self.bids if side is Side.BUY else self.asks

    def best_bid(self) -> int | None:
        return self.bids.best_price()

    def best_ask(self) -> int | None:
        return self.asks.best_price()

    def _crosses(self, side: Side, price: int, opposite_best: int) -> bool:
        return price >= opposite_best if side is Side.BUY else price <= opposite_best

    def _match(self, order: Order, limit_price: int | None) -> tuple[list[Trade], int]:
        """Walk the opposite side in priority order; returns (trades, unfilled size)."""
        opposite = self._side(order.side.opposite)
        trades: list[Trade] = []
        remaining = order.size
        while remaining > 0 and not opposite.is_empty:
            best = opposite.best_price()
            if limit_price is not None and not self._crosses(order.side, limit_price, best):
                break
            queue = opposite.level_queue(best)
            while remaining > 0 and queue:
                resting = queue[0]
                fill = min(remaining, resting.size)
                trades.append(Trade(order.time, best, fill, order.side))
                resting.size -= fill
                remaining -= fill
                if resting.size == 0:
                    queue.popleft()
                    del self._index[resting.id]
            opposite.remove_level_if_empty(best)
        self.trade_log.extend(trades)
        return trades, remaining

    def submit_limit(self, order: Order) -> list[Trade]:
        assert order.kind is OrderKind.LIMIT and order.size > 0 and order.price > 0
        trades, remaining = self._match(order, order.price)
        if remaining > 0:
            side = self._side(order.side)
            side.add(order.price, _Resting(order.id, order.time, remaining))
            self._index[order.id] = (order.side, order.price)
        return trades

    def submit_market(self, order: Order) -> list[Trade]:
        assert order.kind is OrderKind.MARKET and order.size > 0
        if self._side(order.side.opposite).is_empty:
            raise EmptyBookSide(f"market {order.side.name.lower()} {order.size} against empty book")
        trades, _ = self._match(order, None)  # unfilled remainder is dropped
        return trades

    def cancel(self, order_id: int, size: int | None = None) -> int:
        """Remove a resting order (or reduce it by `size`); returns removed size."""
        if order_id not in self._index:
            raise UnknownOrder(order_id)
        side, price = self._index[order_id]
        queue = self._side(side).level_queue(price)
        for i, resting in enumerate(queue):
            if resting.id == order_id:
                if size is not None and size < resting.size:
                    resting.size -= size
                    return size
                removed = resting.size
                del queue[i]
                del self._index[order_id]
                self._side(side).remove_level_if_empty(price)
                return removed
        raise UnknownOrder(order_id)  # index out of sync; unreachable

    def resting_order(self, order_id: int) -> tuple[Side, int, int]:
        """(side, price, size) of a resting order."""
        if order_id not in self._index:
            raise UnknownOrder(order_id)
        side, price = self._index[order_id]
        for resting in self._side(side).level_queue(price):
            if resting.id == order_id:
                return side, price, resting.size
        raise UnknownOrder(order_id)

    def iter_resting(self, side: Side):
        """Yield (order_id, price, size) on one side in priority order."""
        for price, resting in self._side(side).iter_resting():
            yield resting.id, price, resting.size

    def snapshot(self, levels: int = 10) -> LobSnapshot:
        ask_p = [MISSING] * levels
        ask_v = [MISSING] * levels
        bid_p = [MISSING] * levels
        bid_v = [MISSING] * levels
        for i, price in enumerate(self.asks.prices_by_priority()[:levels]):
            ask_p[i] = price
            ask_v[i] = self.asks.level_size(price)
        for i, price in enumerate(self.bids.prices_by_priority()[:levels]):
            bid_p[i] = price
            bid_v[i] = self.bids.level_size(price)
        return LobSnapshot(ask_p, ask_v, bid_p, bid_v)


@dataclass
class DerivedMetrics:
    mid_price: float
    spread: float
    order_volume_imbalance: float
    vwap: float


def derived_metrics(snapshot: LobSnapshot, trades: list[Trade]) -> DerivedMetrics:
    """Mid, spread, order volume imbalance over the snapshot depth, and session VWAP.

    One-sided or empty books yield MISSING sentinels for mid/spread/imbalance;
    VWAP is MISSING until the first trade.
    """
    bid = snapshot.best_bid()
    ask = snapshot.best_ask()
    if bid is None or ask is None:
        mid = spread = float(MISSING)
    else:
        mid = (ask + bid) / 2.0
        spread = float(ask - bid)
    bid_vol = sum(v for v in snapshot.bid_size if v != MISSING)
    ask_vol = sum(v for v in snapshot.ask_size if v != MISSING)
    total = bid_vol + ask_vol
    ovi = (bid_vol - ask_vol) / total if total > 0 else float(MISSING)
    traded = sum(t.size for t in trades)
    vwap = sum(t.price * t.size for t in trades) / traded if traded > 0 else float(MISSING)
    return DerivedMetrics(mid, spread, ovi, vwap)
