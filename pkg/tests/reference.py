"""Independent brute-force matching oracle used by the engine tests.

Keeps every resting order in a flat list and re-sorts by (price, arrival)
priority on each operation. Deliberately simple and slow; any disagreement
with the engine points at an engine bug.
"""

import numpy as np

from lobsim.book import (
    MISSING,
    TICK,
    EmptyBookSide,
    Order,
    OrderKind,
    Side,
    UnknownOrder,
)


class RefBook:
    def __init__(self):
        self.resting = []  # dicts: id, side, price, size, seq
        self.trades = []  # (price, size, aggressor side value)
        self._seq = 0

    def _queue(self, side):
        rest = [o for o in self.resting if o["side"] is side]
        if side is Side.BUY:
            return sorted(rest, key=lambda o: (-o["price"], o["seq"]))
        return sorted(rest, key=lambda o: (o["price"], o["seq"]))

    def _crosses(self, side, price, best):
        return price >= best if side is Side.BUY else price <= best

    def _match(self, side, size, limit_price):
        trades = []
        while size > 0:
            queue = self._queue(side.opposite)
            if not queue:
                break
            top = queue[0]
            if limit_price is not None and not self._crosses(side, limit_price, top["price"]):
                break
            fill = min(size, top["size"])
            trades.append((top["price"], fill, side.value))
            top["size"] -= fill
            size -= fill
            if top["size"] == 0:
                self.resting.remove(top)
        self.trades.extend(trades)
        return trades, size

    def submit_limit(self, order_id, side, price, size):
        trades, remaining = self._match(side, size, price)
        if remaining > 0:
            self._seq += 1
            self.resting.append(
                {"id": order_id, "side": side, "price": price, "size": remaining,
                 "seq": self._seq}
            )
        return trades

    def submit_market(self, side, size):
        if not self._queue(side.opposite):
            raise EmptyBookSide
        trades, _ = self._match(side, size, None)
        return trades

    def cancel(self, order_id, size=None):
        for o in self.resting:
            if o["id"] == order_id:
                if size is not None and size < o["size"]:
                    o["size"] -= size
                    return size
                removed = o["size"]
                self.resting.remove(o)
                return removed
        raise UnknownOrder(order_id)

    def snapshot_row(self, levels=10):
        row = []
        asks = self._queue(Side.SELL)
        bids = self._queue(Side.BUY)
        ask_levels = sorted({o["price"] for o in asks})[:levels]
        bid_levels = sorted({o["price"] for o in bids}, reverse=True)[:levels]
        for i in range(levels):
            ap = ask_levels[i] if i < len(ask_levels) else MISSING
            av = sum(o["size"] for o in asks if o["price"] == ap) if ap != MISSING else MISSING
            bp = bid_levels[i] if i < len(bid_levels) else MISSING
            bv = sum(o["size"] for o in bids if o["price"] == bp) if bp != MISSING else MISSING
            row += [ap, av, bp, bv]
        return row


def random_ops(rng: np.random.Generator, n_ops: int, base_price: int = 1_000_000):
    """Random mixed operation stream: (kind, side, price, size, order_id)."""
    ops = []
    live = []
    next_id = 1
    for _ in range(n_ops):
        r = rng.random()
        if r < 0.55 or not live:
            side = Side.BUY if rng.random() < 0.5 else Side.SELL
            price = base_price + int(rng.integers(-20, 21)) * TICK
            size = int(rng.integers(1, 500))
            ops.append((OrderKind.LIMIT, side, price, size, next_id))
            live.append(next_id)
            next_id += 1
        elif r < 0.85:
            oid = int(rng.choice(live))
            size = int(rng.integers(1, 200)) if rng.random() < 0.3 else None
            ops.append((OrderKind.CANCEL, None, 0, size, oid))
        else:
            side = Side.BUY if rng.random() < 0.5 else Side.SELL
            size = int(rng.integers(1, 300))
            ops.append((OrderKind.MARKET, side, 0, size, next_id))
            next_id += 1
    return ops


def apply_ops(book, ref: RefBook, ops, levels=10, check_every=1):
    """Drive both implementations and compare snapshots and trades exactly."""
    for i, (kind, side, price, size, oid) in enumerate(ops):
        if kind is OrderKind.LIMIT:
            et = book.submit_limit(Order(oid, i, kind, side, price, size))
            rt = ref.submit_limit(oid, side, price, size)
        elif kind is OrderKind.MARKET:
            try:
                et = book.submit_market(Order(oid, i, kind, side, 0, size))
            except EmptyBookSide:
                et = None
            try:
                rt = ref.submit_market(side, size)
            except EmptyBookSide:
                rt = None
            assert (et is None) == (rt is None), f"op {i}: empty-side disagreement"
            if et is None:
                continue
        else:
            try:
                er = book.cancel(oid, size=size)
            except UnknownOrder:
                er = None
            try:
                rr = ref.cancel(oid, size=size)
            except UnknownOrder:
                rr = None
            assert er == rr, f"op {i}: cancel result {er} != {rr}"
            continue
        assert [(t.price, t.size, t.aggressor_side.value) for t in et] == rt, f"op {i}"
        if i % check_every == 0:
            assert book.snapshot(levels).to_row() == ref.snapshot_row(levels), f"op {i}"
    assert book.snapshot(levels).to_row() == ref.snapshot_row(levels)
    assert [(t.price, t.size, t.aggressor_side.value) for t in book.trade_log] == ref.trades
