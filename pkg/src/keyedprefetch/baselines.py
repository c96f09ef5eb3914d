"""Baseline cache policies: LRU (wallclock access order) and second-chance Clock.

Both expose the same surface as :class:`~keyedprefetch.tac.TimestampAwareCache`
and push dirty victims through the same eviction buffer, so a run only
differs in which entry gets evicted.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Hashable

from .tac import ACCESSED, PREFETCHED, CacheEntry, EvictionBuffer, EvictionBufferFull, NotResident, _WritebackMixin


class _BaselineCache(_WritebackMixin):
    policy = "baseline"

    def __init__(
        self,
        capacity: int,
        eviction_buffer_slots: int | None = None,
        on_evict: Callable[[CacheEntry], None] | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.evictbuf = EvictionBuffer(eviction_buffer_slots or max(1, capacity // 16))
        self.on_evict = on_evict
        self._index: dict[Hashable, CacheEntry] = {}
        self.touch_absent = 0
        self.evictions = 0
        self.prefetched_unused = 0

    def __contains__(self, key) -> bool:
        return key in self._index

    def in_list(self, key) -> bool:
        e = self._index.get(key)
        return e is not None and not e.staged

    def entry(self, key) -> CacheEntry | None:
        return self._index.get(key)

    def get(self, key):
        entry = self._index.get(key)
        if entry is None:
            return None
        if entry.staged:
            self._reinstate(entry)
        return entry.state

    def touch_access(self, key, access_time: int) -> None:
        entry = self._index.get(key)
        if entry is None:
            self.touch_absent += 1
            return
        if entry.staged:
            self._reinstate(entry)
        entry.used = True
        entry.origin = ACCESSED
        entry.timestamp = access_time
        self._hit(entry)

    def touch_future(self, key, hint_time: int, hinter=None) -> None:
        # recency-only policies ignore anticipated use
        entry = self._index.get(key)
        if entry is None:
            self.touch_absent += 1
        elif entry.staged:
            self._reinstate(entry)

    def insert(self, key, state, timestamp: int, origin: str = ACCESSED, dirty: bool = False, hinter=None) -> list[CacheEntry]:
        if key in self._index:
            raise KeyError(f"{key!r} already resident")
        entry = CacheEntry(key, state, timestamp, dirty, origin, hinter)
        victims = self._admit(entry)
        self._index[key] = entry
        return victims

    def write(self, key, state, access_time: int) -> None:
        entry = self._index.get(key)
        if entry is None:
            raise NotResident("write to non-resident state")
        if entry.staged:
            self._reinstate(entry)
        entry.state = state
        entry.dirty = True
        entry.version += 1
        entry.used = True
        entry.origin = ACCESSED
        entry.timestamp = access_time
        self._hit(entry)

    def _retire(self, victim: CacheEntry) -> None:
        self.evictions += 1
        if victim.origin == PREFETCHED and not victim.used:
            self.prefetched_unused += 1
        if victim.dirty:
            self.evictbuf.stage(victim)
        else:
            del self._index[victim.key]
        if self.on_evict is not None:
            self.on_evict(victim)

    def _reinstate(self, entry: CacheEntry) -> None:
        self.evictbuf.unstage(entry.key)
        try:
            self._admit(entry)
        except EvictionBufferFull:
            self.evictbuf.stage(entry)
            raise

    def _admit(self, entry: CacheEntry) -> list[CacheEntry]:
        raise NotImplementedError

    def _hit(self, entry: CacheEntry) -> None:
        raise NotImplementedError


class LRUCache(_BaselineCache):
    """Least-recently-used by processing (arrival) order, not event time."""

    policy = "lru"

    def __init__(self, capacity: int, eviction_buffer_slots: int | None = None, on_evict=None):
        super().__init__(capacity, eviction_buffer_slots, on_evict)
        self._order: OrderedDict[Hashable, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._order)

    def keys(self) -> list:
        """Most recent first, to match the TAC's head-to-tail listing."""
        return list(reversed(self._order))

    def _admit(self, entry: CacheEntry) -> list[CacheEntry]:
        victims = []
        if len(self._order) >= self.capacity:
            oldest = next(iter(self._order.values()))
            if oldest.dirty and self.evictbuf.full:
                raise EvictionBufferFull(oldest.key)
            self._order.popitem(last=False)
            self._retire(oldest)
            victims.append(oldest)
        self._order[entry.key] = entry
        return victims

    def _hit(self, entry: CacheEntry) -> None:
        self._order.move_to_end(entry.key)


class ClockCache(_BaselineCache):
    """Second-chance Clock over a fixed ring of ``capacity`` slots.

    New entries start with a clear reference bit; a hit sets it.  On a miss
    with a full ring the hand clears set bits until it finds a clear one,
    evicts that slot, reuses it, and steps past it.
    """

    policy = "clock"

    def __init__(self, capacity: int, eviction_buffer_slots: int | None = None, on_evict=None):
        super().__init__(capacity, eviction_buffer_slots, on_evict)
        self.ring: list[CacheEntry | None] = [None] * capacity
        self.refbit: list[bool] = [False] * capacity
        self.slot: dict[Hashable, int] = {}
        self.hand = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def keys(self) -> list:
        return [e.key for e in self.ring if e is not None]

    def _admit(self, entry: CacheEntry) -> list[CacheEntry]:
        victims = []
        if self._count >= self.capacity:
            # find the victim without side effects first, so a full buffer can refuse cleanly
            cap = self.capacity
            h, steps = self.hand, 0
            while self.refbit[h] and steps < cap:
                h = (h + 1) % cap
                steps += 1
            victim = self.ring[h]
            if victim.dirty and self.evictbuf.full:
                raise EvictionBufferFull(victim.key)
            for i in range(steps):
                self.refbit[(self.hand + i) % cap] = False
            self.hand = h
            del self.slot[victim.key]
            self.ring[h] = None
            self._count -= 1
            self._retire(victim)
            victims.append(victim)
        h = self.hand
        while self.ring[h] is not None:
            h = (h + 1) % self.capacity
        self.ring[h] = entry
        self.refbit[h] = False
        self.slot[entry.key] = h
        self._count += 1
        self.hand = (h + 1) % self.capacity
        return victims

    def _hit(self, entry: CacheEntry) -> None:
        self.refbit[self.slot[entry.key]] = True


def make_cache(policy: str, capacity: int, eviction_buffer_slots: int | None = None,
               capacity_bytes: int | None = None, on_evict=None):
    from .tac import TimestampAwareCache

    if policy == "tac":
        return TimestampAwareCache(capacity, eviction_buffer_slots, capacity_bytes, on_evict)
    if capacity_bytes is not None:
        raise ValueError("byte budgets are only supported by the TAC")
    if policy == "lru":
        return LRUCache(capacity, eviction_buffer_slots, on_evict)
    if policy == "clock":
        return ClockCache(capacity, eviction_buffer_slots, on_evict)
    raise ValueError(f"unknown cache policy {policy!r}")
