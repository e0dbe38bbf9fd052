import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offrec.data import (
    IngestConfig,
    RewardMap,
    SyntheticConfig,
    build_buffer,
    ingest_csv,
    prefix_window,
    read_item_map,
    sessions_from_rows,
    split_sessions,
    synthetic_rows,
    write_item_map,
    write_log_csv,
)
from offrec.errors import ConfigError, DataError

from conftest import make_session


def _write(tmp_path, rows, header="session_id,item_id,timestamp,behavior"):
    p = tmp_path / "log.csv"
    p.write_text(header + "\n" + "\n".join(rows) + "\n")
    return p


def test_ingest_small_vocabulary(tmp_path):
    p = _write(tmp_path, ["s1,A,1,click", "s1,B,2,click", "s1,A,3,click"])
    res = ingest_csv(p)
    assert res.n_items == 2
    assert len(res.sessions) == 1
    assert res.sessions[0].items == (0, 1, 0)


def test_ingest_drops_short_sessions(tmp_path):
    p = _write(tmp_path, ["s1,A,1,click", "s1,B,2,click", "s2,A,1,click", "s2,B,2,click", "s2,C,3,click"])
    res = ingest_csv(p, IngestConfig(min_length=3))
    assert res.n_dropped == 1
    assert [s.session_id for s in res.sessions] == ["s2"]


def test_ingest_orders_by_timestamp_then_input(tmp_path):
    p = _write(tmp_path, ["s1,C,30,click", "s1,A,10,click", "s1,D,20,click", "s1,B,20,click"])
    res = ingest_csv(p, IngestConfig(min_length=1))
    raw = {v: k for k, v in res.item_map.items()}
    assert [raw[i] for i in res.sessions[0].items] == ["A", "D", "B", "C"]
    assert res.sessions[0].timestamps == (10, 20, 20, 30)


def test_ingest_counts_malformed_rows(tmp_path):
    p = _write(tmp_path, ["s1,A,1,click", "s1,B,notatime,click", ",C,3,click", "s1,C,4,purchase", "s1,D,5,addtocart"])
    res = ingest_csv(p, IngestConfig(min_length=1))
    assert res.n_malformed == 2
    assert res.malformed_lines == [3, 4]
    assert res.sessions[0].purchases == (False, True, True)


def test_ingest_unknown_label_is_fatal(tmp_path):
    p = _write(tmp_path, ["s1,A,1,click", "s1,B,2,wishlist"])
    with pytest.raises(DataError, match="wishlist"):
        ingest_csv(p)


def test_ingest_missing_column(tmp_path):
    p = _write(tmp_path, ["s1,A,1"], header="session_id,item_id,timestamp")
    with pytest.raises(DataError):
        ingest_csv(p)


def test_purchase_sessions_only():
    rows = [("a", "x", 1, "click"), ("a", "y", 2, "click"), ("b", "x", 1, "click"), ("b", "z", 2, "purchase")]
    res = sessions_from_rows(rows, IngestConfig(min_length=2, purchase_sessions_only=True))
    assert [s.session_id for s in res.sessions] == ["b"]


def test_item_map_roundtrip_and_stable_reingest(tmp_path):
    rows = synthetic_rows(SyntheticConfig(n_sessions=50, n_items=40), seed=3)
    p = tmp_path / "log.csv"
    write_log_csv(p, rows)
    a, b = ingest_csv(p), ingest_csv(p)
    assert a.item_map == b.item_map
    ba = build_buffer(a.sessions, RewardMap(), 5, a.n_items)
    bb = build_buffer(b.sessions, RewardMap(), 5, b.n_items)
    assert ba.to_bytes() == bb.to_bytes()
    write_item_map(tmp_path / "map.csv", a.item_map)
    assert read_item_map(tmp_path / "map.csv") == a.item_map


def test_buffer_three_clicks():
    buf = build_buffer([make_session("s", [0, 1, 2])], RewardMap(0.2, 1.0, shift=-1.0), window=10, n_items=3)
    assert len(buf) == 3
    np.testing.assert_allclose(buf.rewards, [-0.8, -0.8, -0.8])
    assert buf.terminals.tolist() == [False, False, True]
    pad = 3
    assert buf.states[0].tolist() == [pad] * 10
    assert buf.states[2].tolist() == [pad] * 8 + [0, 1]
    assert buf.next_states[2].tolist() == [pad] * 7 + [0, 1, 2]
    assert buf.actions.tolist() == [0, 1, 2]
    assert buf.state_len.tolist() == [0, 1, 2]


def test_buffer_single_event():
    buf = build_buffer([make_session("s", [4])], RewardMap(), window=10, n_items=5)
    assert len(buf) == 1
    assert buf.terminals[0]
    assert buf.states[0].tolist() == [5] * 10


def test_purchase_reward_is_zero():
    rm = RewardMap()
    assert rm.purchase == 0.0
    assert rm.click == pytest.approx(-0.8)
    buf = build_buffer([make_session("s", [0, 1], [False, True])], rm, 3, 2)
    assert buf.rewards[1] == 0.0


def test_reward_map_bad_shift():
    with pytest.raises(ConfigError):
        RewardMap(0.2, 1.0, shift=-0.5)


def test_empty_buffer_warns(caplog):
    with caplog.at_level(logging.WARNING):
        buf = build_buffer([], RewardMap(), 4, 10)
    assert len(buf) == 0
    assert "no sessions" in caplog.text


def test_buffer_window_truncation():
    buf = build_buffer([make_session("s", [0, 1, 2, 3, 4])], RewardMap(), window=2, n_items=5)
    assert buf.states[4].tolist() == [2, 3]
    assert buf.next_states[4].tolist() == [3, 4]


def test_buffer_is_read_only():
    buf = build_buffer([make_session("s", [0, 1, 2])], RewardMap(), 3, 3)
    with pytest.raises(ValueError):
        buf.rewards[0] = 1.0


def _sessions(n):
    return [make_session(f"s{i}", [0, 1, 2]) for i in range(n)]


def test_split_ten_sessions():
    sp = split_sessions(_sessions(10), seed=0)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == (8, 1, 1)


def test_split_deterministic():
    assert split_sessions(_sessions(37), 4) == split_sessions(_sessions(37), 4)


def test_split_seeds_differ_same_sizes():
    a, b = split_sessions(_sessions(100), 1), split_sessions(_sessions(100), 2)
    assert a.train != b.train
    for sp in (a, b):
        assert (len(sp.train), len(sp.validation), len(sp.test)) == (80, 10, 10)


def test_split_too_few():
    with pytest.raises(DataError):
        split_sessions(_sessions(9), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 300), st.integers(0, 1000))
def test_split_disjoint_exhaustive(n, seed):
    sp = split_sessions(_sessions(n), seed)
    parts = [set(sp.train), set(sp.validation), set(sp.test)]
    assert sum(len(p) for p in parts) == n
    assert set.union(*parts) == {f"s{i}" for i in range(n)}
    assert abs(len(sp.train) - 0.8 * n) <= 1 and abs(len(sp.validation) - 0.1 * n) <= 1


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.lists(st.tuples(st.integers(0, 7), st.booleans()), min_size=1, max_size=12), min_size=1, max_size=8),
    st.integers(1, 6),
)
def test_buffer_invariants(raw, window):
    sessions = [make_session(f"s{i}", [x for x, _ in ev], [p for _, p in ev]) for i, ev in enumerate(raw)]
    buf = build_buffer(sessions, RewardMap(), window, 8)
    assert np.all(buf.rewards <= 0)
    ends = np.cumsum([len(s) for s in sessions]) - 1
    assert np.flatnonzero(buf.terminals).tolist() == ends.tolist()
    # next state is the state with the action appended, window-truncated
    expect = np.concatenate([buf.states[:, 1:], buf.actions[:, None]], axis=1)
    np.testing.assert_array_equal(buf.next_states, expect)


def test_prefix_window():
    assert prefix_window([5, 6, 7], 2, 4, 9).tolist() == [9, 9, 5, 6]
    assert prefix_window([5, 6, 7], 0, 2, 9).tolist() == [9, 9]


def test_synthetic_generator_shape():
    cfg = SyntheticConfig(n_sessions=200, n_items=50)
    rows = synthetic_rows(cfg, seed=1)
    assert rows == synthetic_rows(cfg, seed=1)
    res = sessions_from_rows(rows)
    assert len(res.sessions) == 200
    assert res.n_items <= 50
    lengths = [len(s) for s in res.sessions]
    assert min(lengths) >= cfg.min_length and max(lengths) <= cfg.max_length
    assert any(any(s.purchases) for s in res.sessions)
