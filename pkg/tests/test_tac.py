from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from keyedprefetch.tac import ACCESSED, PREFETCHED, EvictionBufferFull, NotResident, TimestampAwareCache
from oracles import replay_against_model


def _cache(cap, items, slots=None):
    c = TimestampAwareCache(cap, slots)
    for k, t in items:
        c.insert(k, b"s" + k.encode(), t)
    return c


def test_get_does_not_reorder():
    c = _cache(3, [("a", 9), ("b", 5), ("c", 3)])
    assert c.get("b") == b"sb"
    assert c.keys() == ["a", "b", "c"]
    assert c.get("zz") is None


def test_touch_access_reorders():
    c = _cache(3, [("a", 9), ("b", 5), ("c", 3)])
    c.touch_access("b", 11)
    assert c.timestamps() == [11, 9, 3]
    assert c.keys() == ["b", "a", "c"]


def test_touch_tie_goes_next_to_head():
    c = _cache(3, [("a", 9), ("b", 5), ("c", 3)])
    c.touch_access("c", 9)
    assert c.keys() == ["c", "a", "b"]


def test_touch_absent_counts():
    c = _cache(2, [("a", 1)])
    c.touch_access("nope", 5)
    c.touch_future("nope", 5)
    assert c.touch_absent == 2 and c.keys() == ["a"]


def test_touch_future_max_rule():
    c = _cache(3, [("k", 5), ("x", 10)])
    c.touch_future("k", 2)
    assert c.entry("k").timestamp == 5
    c.touch_future("k", 20)
    assert c.keys() == ["k", "x"] and c.entry("k").timestamp == 20
    assert not c.entry("k").used or c.entry("k").origin == ACCESSED


def test_touch_future_does_not_mark_used():
    c = TimestampAwareCache(4)
    c.insert("p", b"", 10, PREFETCHED)
    c.touch_future("p", 30)
    assert not c.entry("p").used
    c.touch_access("p", 31)
    assert c.entry("p").used


def test_renewed_entry_survives_wave():
    c = _cache(4, [("a", 1), ("b", 2), ("c", 3), ("d", 4)])
    c.touch_future("a", 20)
    for i, k in enumerate("wxy"):
        c.insert(k, b"", 10 + i)
    assert "a" in c.keys()


def test_insert_evicts_smallest():
    c = _cache(2, [("a", 9), ("b", 5)])
    victims = c.insert("n", b"", 7)
    assert [v.key for v in victims] == ["b"]
    assert c.timestamps() == [9, 7]


def test_insert_older_than_tail_is_own_victim():
    c = _cache(2, [("a", 9), ("b", 5)])
    victims = c.insert("old", b"", 1)
    assert [v.key for v in victims] == ["old"]
    assert "old" not in c


def test_insert_existing_key_rejected():
    c = _cache(2, [("a", 1)])
    with pytest.raises(KeyError):
        c.insert("a", b"", 2)


def test_dirty_victim_is_staged_and_reinstated():
    c = TimestampAwareCache(2, 2)
    c.insert("a", b"A", 1, dirty=True)
    c.insert("b", b"", 5)
    c.insert("c", b"", 6)
    assert "a" in c and not c.in_list("a") and len(c.evictbuf) == 1
    # reinstated at its own (oldest) timestamp it is the tail again and goes straight back
    assert c.get("a") == b"A"
    assert c.keys() == ["c", "b"] and c.entry("a").staged
    c.touch_access("a", 10)
    assert c.in_list("a") and c.keys() == ["a", "c"] and c.entry("a").timestamp == 10
    assert c.entry("b") is None


def test_write_semantics():
    c = _cache(3, [("a", 1), ("b", 2)])
    c.write("a", b"n1", 10)
    c.write("a", b"n2", 11)
    e = c.entry("a")
    assert e.dirty and e.state == b"n2" and e.timestamp == 11 and c.keys()[0] == "a"
    with pytest.raises(NotResident):
        c.write("zz", b"", 1)


def test_evicted_write_reaches_backend_once():
    store = {}
    writes = []
    c = TimestampAwareCache(1, 1)
    c.insert("a", b"", 1)
    c.write("a", b"v", 2)
    c.insert("b", b"", 3)
    n = c.drain(10, lambda k, v: (writes.append(k), store.__setitem__(k, v)))
    assert n == 1 and writes == ["a"] and store == {"a": b"v"} and "a" not in c
    assert c.drain(10, lambda k, v: writes.append(k)) == 0


def test_drain_counts():
    c = TimestampAwareCache(1, 4)
    for i, k in enumerate("abcd"):
        c.insert(k, b"", i, dirty=True)
    assert len(c.evictbuf) == 3
    assert c.drain(0, lambda *_: None) == 0
    assert c.drain(10, lambda *_: None) == 3
    assert len(c.evictbuf) == 0


def test_drain_failure_keeps_entry():
    c = TimestampAwareCache(1, 2)
    c.insert("a", b"", 1, dirty=True)
    c.insert("b", b"", 2)

    def boom(k, v):
        raise OSError("down")

    with pytest.raises(OSError):
        c.drain(1, boom)
    assert c.entry("a").staged and not c.entry("a").writing
    assert c.drain(1, lambda *_: None) == 1


def test_reinstate_during_writeback_is_not_lost():
    c = TimestampAwareCache(1, 2)
    c.insert("a", b"", 1)
    c.write("a", b"v1", 1)
    c.insert("b", b"", 2)
    key, state, version = c.begin_writeback()
    c.write("a", b"v2", 9)  # reinstated and rewritten while the write is in flight
    assert not c.finish_writeback(key, version)
    e = c.entry("a")
    assert e.dirty and e.state == b"v2" and c.in_list("a")


def test_full_buffer_refuses_insert_cleanly():
    c = TimestampAwareCache(1, 1)
    c.insert("a", b"", 1, dirty=True)
    c.insert("b", b"", 2, dirty=True)
    with pytest.raises(EvictionBufferFull):
        c.insert("c", b"", 3)
    assert "c" not in c and c.keys() == ["b"]


def test_flush_and_idempotence():
    c = TimestampAwareCache(20, 8)
    for i in range(20):
        c.insert(i, b"x", i)
    for i in range(5):
        c.write(i * 3, b"y%d" % i, 100 + i)
    store = {}
    assert c.flush(store.__setitem__) == 5
    assert c.flush(store.__setitem__) == 0
    for k in range(20):
        e = c.entry(k)
        if k in store:
            assert store[k] == e.state
        assert not e.dirty


def test_byte_budget():
    c = TimestampAwareCache(100, capacity_bytes=10)
    c.insert("a", b"12345", 1)
    c.insert("b", b"12345", 2)
    c.insert("c", b"1", 3)
    assert c.keys() == ["c", "b"] and c.nbytes == 6


def test_default_eviction_buffer():
    assert TimestampAwareCache(64).evictbuf.bound == 4
    assert TimestampAwareCache(4).evictbuf.bound == 1


# -- properties ------------------------------------------------------------------

_op = st.tuples(
    st.sampled_from(["insert", "insert", "touch_access", "touch_future", "write", "get", "drain"]),
    st.integers(0, 30), st.integers(0, 20), st.booleans(),
)


@given(st.lists(_op, max_size=300), st.integers(1, 8), st.integers(1, 4))
def test_order_oracle_property(ops, cap, slots):
    tac, m, _ = replay_against_model(ops, cap, slots)
    ts = tac.timestamps()
    assert ts == sorted(ts, reverse=True)
    assert tac.keys() == m.order()


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 50)), max_size=200), st.integers(1, 6))
def test_victims_are_oldest(ops, cap):
    c = TimestampAwareCache(cap)
    for k, t in ops:
        if k in c:
            c.touch_access(k, t)
            continue
        listed = {e.key: e.timestamp for e in c}
        victims = c.insert(k, b"", t)
        for v in victims:
            survivors = [ts for kk, ts in {**listed, k: t}.items() if kk != v.key and kk in c]
            assert all(v.timestamp <= s for s in survivors)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from(["w", "g", "d", "i"]), st.integers(0, 12), st.integers(0, 30)), max_size=200))
def test_dirty_durability(ops):
    store: dict = {}
    last: dict = {}
    c = TimestampAwareCache(3, 2)
    pending = None
    for kind, k, t in ops:
        try:
            if kind == "i" and k not in c:
                c.insert(k, store.get(k, b""), t)
            elif kind == "w" and k in c:
                v = b"%d@%d" % (k, t)
                c.write(k, v, t)
                last[k] = v
            elif kind == "g":
                c.get(k)
            elif kind == "d":
                # a two-phase write that may straddle a reinstate or rewrite
                if pending is not None:
                    key, state, ver = pending
                    store[key] = state
                    c.finish_writeback(key, ver)
                    pending = None
                else:
                    pending = c.begin_writeback()
        except EvictionBufferFull:
            if pending is None:
                pending = c.begin_writeback()
    if pending is not None:
        store[pending[0]] = pending[1]
        c.finish_writeback(pending[0], pending[2])
    c.flush(store.__setitem__)
    for k, v in last.items():
        assert store[k] == v
