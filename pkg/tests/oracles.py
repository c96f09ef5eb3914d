"""Brute-force reference models the tests compare the real structures against.

They are written for obviousness, not speed: plain dicts and lists, a full
scan to find every victim, pure-Python integer hashing.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from keyedprefetch.hashing import key_hash, row_seeds
from keyedprefetch.tac import EvictionBufferFull, TimestampAwareCache

M64 = (1 << 64) - 1


# -- count-min sketch ---------------------------------------------------------


def splitmix(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


class ScalarCMS:
    """Row-by-row Count-Min Sketch over Python ints."""

    def __init__(self, depth, width, bits, threshold, aging_interval, seed):
        self.width = width
        self.cap = (1 << bits) - 1
        self.threshold = threshold
        self.delta = aging_interval
        self.seeds = [int(s) for s in row_seeds(depth, seed)]
        self.rows = [[0] * width for _ in range(depth)]
        self.since = 0

    def cols(self, key: bytes) -> list[int]:
        h = key_hash(key)
        return [splitmix(h ^ s) % self.width for s in self.seeds]

    def update(self, key: bytes) -> None:
        for row, c in zip(self.rows, self.cols(key)):
            row[c] = min(row[c] + 1, self.cap)
        self.since += 1
        if self.delta is not None and self.since >= self.delta:
            for row in self.rows:
                for j in range(self.width):
                    row[j] >>= 1
            self.since = 0

    def estimate(self, key: bytes) -> int:
        return min(row[c] for row, c in zip(self.rows, self.cols(key)))

    def emits(self, key: bytes) -> bool:
        """Update then test, the way a hint extractor uses the sketch."""
        self.update(key)
        return self.estimate(key) < self.threshold


# -- timestamp-sorted cache model ----------------------------------------------


class CacheFull(Exception):
    pass


class SortedModel:
    """Cache as ``key -> [timestamp, seq]``; the victim is the smallest (timestamp, seq).

    ``seq`` grows each time an entry is (re)positioned, so among equal
    timestamps the most recently positioned entry survives longest.
    Dirty victims wait in a FIFO staging area of ``slots`` entries.
    """

    def __init__(self, capacity: int, slots: int):
        self.capacity = capacity
        self.slots = slots
        self.listed: dict = {}
        self.dirty: dict = {}
        self.staged: OrderedDict = OrderedDict()
        self.victims: list = []
        self._n = 0

    def _seq(self) -> int:
        self._n += 1
        return self._n

    def __contains__(self, key) -> bool:
        return key in self.listed or key in self.staged

    def order(self) -> list:
        return [k for k, _ in sorted(self.listed.items(), key=lambda kv: (kv[1][0], kv[1][1]), reverse=True)]

    def _trim(self) -> None:
        excess = len(self.listed) - self.capacity
        if excess <= 0:
            return
        rank = lambda k: tuple(self.listed[k])  # noqa: E731
        doomed = [min(self.listed, key=rank)] if excess == 1 else sorted(self.listed, key=rank)[:excess]
        if sum(self.dirty[k] for k in doomed) > self.slots - len(self.staged):
            raise CacheFull
        for k in doomed:
            ts = self.listed.pop(k)[0]
            self.victims.append(k)
            if self.dirty[k]:
                self.staged[k] = ts
            else:
                del self.dirty[k]

    def _reinstate(self, key, ts) -> None:
        old = self.staged.pop(key)
        self.listed[key] = [old if ts is None else ts, self._seq()]
        try:
            self._trim()
        except CacheFull:
            del self.listed[key]
            self.staged[key] = old
            raise

    def insert(self, key, ts: int, dirty: bool) -> None:
        self.listed[key] = [ts, self._seq()]
        self.dirty[key] = dirty
        try:
            self._trim()
        except CacheFull:
            del self.listed[key]
            del self.dirty[key]
            raise

    def touch_access(self, key, ts: int) -> None:
        if key in self.staged:
            self._reinstate(key, ts)
        elif key in self.listed:
            self.listed[key] = [ts, self._seq()]

    def touch_future(self, key, ts: int) -> None:
        if key in self.staged:
            self._reinstate(key, max(self.staged[key], ts))
        elif key in self.listed and ts > self.listed[key][0]:
            self.listed[key] = [ts, self._seq()]

    def write(self, key, ts: int) -> None:
        self.dirty[key] = True
        self.touch_access(key, ts)

    def get(self, key) -> None:
        if key in self.staged:
            self._reinstate(key, None)

    def drain(self, n: int) -> None:
        for _ in range(min(n, len(self.staged))):
            k, _ = self.staged.popitem(last=False)
            del self.dirty[k]


class EventTimeLRU:
    """Evict the key whose last access has the oldest event time; ties go to the least recently touched."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.last: dict = {}
        self.clock = 0
        self.victims: list = []

    def access(self, key, event_time: int) -> bool:
        self.clock += 1
        hit = key in self.last
        self.last[key] = (event_time, self.clock)
        if len(self.last) > self.capacity:
            victim = min(self.last, key=lambda k: self.last[k])
            del self.last[victim]
            self.victims.append(victim)
        return hit


# -- textbook baselines ---------------------------------------------------------


class TextbookLRU:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.stack: list = []
        self.victims: list = []

    def access(self, key) -> bool:
        if key in self.stack:
            self.stack.remove(key)
            self.stack.append(key)
            return True
        if len(self.stack) == self.capacity:
            self.victims.append(self.stack.pop(0))
        self.stack.append(key)
        return False


class TextbookClock:
    """Second chance: frames fill in order, a hit sets the bit, the hand clears bits as it passes."""

    def __init__(self, capacity: int):
        self.frames: list = [None] * capacity
        self.ref = [0] * capacity
        self.hand = 0
        self.victims: list = []

    def access(self, key) -> bool:
        if key in self.frames:
            self.ref[self.frames.index(key)] = 1
            return True
        n = len(self.frames)
        if self.frames[self.hand] is not None:
            while self.ref[self.hand]:
                self.ref[self.hand] = 0
                self.hand = (self.hand + 1) % n
            self.victims.append(self.frames[self.hand])
        self.frames[self.hand] = key
        self.ref[self.hand] = 0
        self.hand = (self.hand + 1) % n
        return False


# -- random traces ----------------------------------------------------------------


def random_tac_ops(rng: np.random.Generator, n_ops: int, n_keys: int, t_max: int = 64) -> list[tuple]:
    """Operation tuples for the TAC order oracle; small timestamp range forces ties."""
    kinds = ["insert", "insert", "touch_access", "touch_future", "write", "get", "drain"]
    ks = rng.integers(len(kinds), size=n_ops).tolist()
    keys = rng.integers(n_keys, size=n_ops).tolist()
    stamps = rng.integers(t_max, size=n_ops).tolist()
    dirty = (rng.random(n_ops) < 0.3).tolist()
    return [(kinds[a], b, c, d) for a, b, c, d in zip(ks, keys, stamps, dirty)]


# -- replay drivers -----------------------------------------------------------------


def replay_against_model(ops, cap, slots):
    """Apply ``ops`` to a TAC and the sorted model; return (tac, model, victims)."""
    victims = []
    tac = TimestampAwareCache(cap, slots, on_evict=lambda e: victims.append(e.key))
    m = SortedModel(cap, slots)
    for kind, k, ts, dirty in ops:
        if kind == "drain":
            tac.drain(ts % 4, lambda *_: None)
            m.drain(ts % 4)
            continue
        if kind == "insert" and k in m or kind != "insert" and k not in m:
            continue
        real = mine = None
        try:
            if kind == "insert":
                tac.insert(k, b"v", ts, dirty=dirty)
            elif kind == "write":
                tac.write(k, b"w", ts)
            elif kind == "get":
                tac.get(k)
            else:
                getattr(tac, kind)(k, ts)
        except EvictionBufferFull:
            real = "full"
        try:
            if kind == "insert":
                m.insert(k, ts, dirty)
            elif kind == "get":
                m.get(k)
            else:
                getattr(m, kind)(k, ts)
        except CacheFull:
            mine = "full"
        assert real == mine, (kind, k, ts)
        assert victims == m.victims
        assert len(tac) <= cap and len(tac.evictbuf) <= slots
    return tac, m, victims
