"""Parsing, event classification, normalization, and windowing tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lobsim.book import MISSING, TICK, OrderBook, OrderKind, Side
from lobsim.data import (
    DegenerateFeature,
    FeatureScaler,
    NormStats,
    ParseError,
    WindowDataset,
    build_feature_arrays,
    compute_depth,
    filter_events,
    fit_norm_stats,
    make_dataset,
    parse_message_file,
    parse_orderbook_file,
    replay_events,
)
from lobsim.synthetic import SyntheticConfig, generate_session


class TestParsing:
    def test_message_round_trip(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("34200.189462828,1,11885113,21,2238100,1\n34200.2,4,11885113,21,2238100,1\n")
        msgs = parse_message_file(p)
        assert len(msgs) == 2
        assert msgs[0].time == pytest.approx(34200.189462828)
        assert msgs[0].event_type == 1 and msgs[0].order_id == 11885113
        assert msgs[0].size == 21 and msgs[0].price == 2238100 and msgs[0].direction == 1

    def test_message_bad_column_count(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("34200.0,1,5,10,100\n")
        with pytest.raises(ParseError) as exc:
            parse_message_file(p)
        assert exc.value.line_no == 1

    def test_message_bad_value_reports_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("34200.0,1,5,10,1000,1\n34201.0,1,x,10,1000,1\n")
        with pytest.raises(ParseError) as exc:
            parse_message_file(p)
        assert exc.value.line_no == 2

    def test_orderbook_shape(self, tmp_path):
        p = tmp_path / "b.csv"
        row = ",".join(["100"] * 40)
        p.write_text(row + "\n" + row + "\n")
        arr = parse_orderbook_file(p)
        assert arr.shape == (2, 40) and arr.dtype == np.int64

    def test_orderbook_wrong_width(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text(",".join(["1"] * 39) + "\n")
        with pytest.raises(ParseError):
            parse_orderbook_file(p)


class TestFilterEvents:
    def _msg(self, event_type, direction=1, **kw):
        import lobsim.data as d

        defaults = dict(time=1.0, order_id=7, size=10, price=1000)
        defaults.update(kw)
        return d.RawMessage(event_type=event_type, direction=direction, **defaults)

    def test_limit_kept(self):
        (ev,) = filter_events([self._msg(1, direction=1)])
        assert ev.kind is OrderKind.LIMIT and ev.side is Side.BUY

    def test_cancel_codes(self):
        evs = filter_events([self._msg(2, direction=-1), self._msg(3, direction=-1)])
        assert all(e.kind is OrderKind.CANCEL and e.side is Side.SELL for e in evs)

    def test_visible_execution_flips_to_aggressor(self):
        # execution of a resting buy means a sell aggressor hit it
        (ev,) = filter_events([self._msg(4, direction=1)])
        assert ev.kind is OrderKind.MARKET and ev.side is Side.SELL

    def test_hidden_execution_dropped(self):
        assert filter_events([self._msg(5), self._msg(6), self._msg(7)]) == []


class TestComputeDepth:
    def test_signed_depths(self):
        from lobsim.book import Order

        book = OrderBook()
        book.submit_limit(Order(1, 0, OrderKind.LIMIT, Side.BUY, 1_000_000, 10))
        book.submit_limit(Order(2, 0, OrderKind.LIMIT, Side.SELL, 1_000_200, 10))
        assert compute_depth(OrderKind.LIMIT, Side.BUY, 1_000_000 - 3 * TICK, book) == 3
        assert compute_depth(OrderKind.LIMIT, Side.BUY, 1_000_000 + TICK, book) == -1
        assert compute_depth(OrderKind.LIMIT, Side.SELL, 1_000_200 + 2 * TICK, book) == 2

    def test_empty_side_is_zero(self):
        assert compute_depth(OrderKind.LIMIT, Side.BUY, 999, OrderBook()) == 0


class TestFeatureScaler:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_transform_inverse_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(5.0, 3.0, size=(50, 4)) * rng.uniform(0.5, 2.0, size=4)
        scaler = FeatureScaler().fit(x)
        z = scaler.transform(x)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)
        assert np.allclose(scaler.inverse_transform(z), x)

    def test_zero_variance_raises(self):
        x = np.ones((10, 2))
        x[:, 1] = np.arange(10)
        with pytest.raises(DegenerateFeature):
            FeatureScaler().fit(x)

    def test_stats_json_round_trip(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(30, 5))
        lob = rng.normal(size=(31, 40)) + 5.0
        stats = fit_norm_stats(feats, lob)
        again = NormStats.from_json(stats.to_json())
        assert np.allclose(again.order_scaler.mean_, stats.order_scaler.mean_)
        assert np.allclose(again.lob_scaler.std_, stats.lob_scaler.std_)
        # direction column is pinned to identity
        assert stats.order_scaler.mean_[3] == 0.0 and stats.order_scaler.std_[3] == 1.0


@pytest.fixture(scope="module")
def small_events():
    msgs, _ = generate_session(SyntheticConfig(n_events=800, seed=5))
    import lobsim.data as d

    raw = [
        d.RawMessage(float(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]), int(r[5]))
        for r in msgs
    ]
    return filter_events(raw)


class TestFeatureArrays:
    def test_shapes_and_alignment(self, small_events):
        feats, types, lob = build_feature_arrays(small_events)
        n = len(feats)
        assert types.shape == (n,)
        assert lob.shape == (n + 1, 40)
        assert np.all(lob[0] == MISSING)  # pre-session state
        assert feats[0, 0] == 0.0  # first offset
        assert np.all(feats[:, 0] >= 0)

    def test_offsets_reconstruct_times(self, small_events):
        feats, _, _ = build_feature_arrays(small_events)
        kept = [ev for ev, _, _ in replay_events(small_events)]
        times = kept[0].time + np.concatenate([[0.0], np.cumsum(feats[1:, 0])])
        assert np.allclose(times, [e.time for e in kept])

    def test_window_dataset_contents(self, small_events):
        ds = make_dataset(small_events, window=16)
        feats, types, lob = build_feature_arrays(small_events)
        assert len(ds) == len(feats) - 16 + 1
        cf, ct, lb, tf, tt = ds.get(3)
        assert cf.shape == (15, 5) and ct.shape == (15,) and lb.shape == (16, 40)
        # target is the normalized row right after the conditioning slice
        expected = ds.stats.order_scaler.transform(feats)[3 + 15]
        assert np.allclose(tf, expected)
        assert tt == types[3 + 15]

    def test_dataset_save_load(self, small_events, tmp_path):
        ds = make_dataset(small_events, window=16)
        p = tmp_path / "ds.npz"
        ds.save(p)
        again = WindowDataset.load(p)
        assert len(again) == len(ds) and again.window == ds.window
        for a, b in zip(again.get(0), ds.get(0)):
            assert np.allclose(a, b)

    def test_val_split_reuses_train_stats(self, small_events):
        half = len(small_events) // 2
        tr = make_dataset(small_events[:half], window=16)
        va = make_dataset(small_events[half:], stats=tr.stats, window=16)
        assert va.stats is tr.stats
