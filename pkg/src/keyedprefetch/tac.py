"""Timestamp-Aware Cache.

Accessed and prefetched state share one ordering: every entry carries an
event-time timestamp (last access for accessed state, expected use for
prefetched state) and the smallest timestamp is evicted first.

Three structures back it:

* an index from key to entry,
* a doubly-linked list sorted by descending timestamp (head = newest),
* an eviction buffer holding dirty victims until an I/O worker writes them
  back, so inserts never wait on backend writes.

Equal timestamps are broken by positioning order: the entry positioned most
recently sits closer to the head.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from typing import Callable, Hashable, Iterator

ACCESSED = "accessed"
PREFETCHED = "prefetched"


class EvictionBufferFull(RuntimeError):
    """Raised instead of overflowing the eviction buffer; retry after a drain."""


class NotResident(KeyError):
    pass


class CacheEntry:
    __slots__ = (
        "key", "state", "timestamp", "dirty", "origin", "used", "hinter",
        "seq", "version", "staged", "writing", "prev", "next",
    )

    def __init__(self, key, state, timestamp, dirty, origin, hinter=None):
        self.key = key
        self.state = state
        self.timestamp = timestamp
        self.dirty = dirty
        self.origin = origin
        self.used = origin == ACCESSED
        self.hinter = hinter
        self.seq = 0
        self.version = 0
        self.staged = False
        self.writing = False
        self.prev: CacheEntry | None = None
        self.next: CacheEntry | None = None

    @property
    def size(self) -> int:
        return len(self.state)

    def __repr__(self) -> str:
        flags = ("D" if self.dirty else "") + ("S" if self.staged else "")
        return f"<{self.key!r} t={self.timestamp} {self.origin} {flags}>"


class EvictionBuffer:
    """Bounded FIFO of dirty victims awaiting writeback."""

    def __init__(self, bound: int):
        if bound < 1:
            raise ValueError("eviction buffer bound must be >= 1")
        self.bound = bound
        self._q: OrderedDict[Hashable, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._q)

    def __contains__(self, key) -> bool:
        return key in self._q

    def room(self) -> int:
        return self.bound - len(self._q)

    @property
    def full(self) -> bool:
        return len(self._q) >= self.bound

    def stage(self, entry: CacheEntry) -> None:
        if len(self._q) >= self.bound:
            raise EvictionBufferFull(entry.key)
        entry.staged = True
        self._q[entry.key] = entry

    def unstage(self, key) -> CacheEntry:
        entry = self._q.pop(key)
        entry.staged = False
        return entry

    def next_writable(self) -> CacheEntry | None:
        for entry in self._q.values():
            if not entry.writing:
                return entry
        return None

    def entries(self) -> list[CacheEntry]:
        return list(self._q.values())


class _WritebackMixin:
    """Writeback protocol shared by the TAC and the baseline caches.

    Subclasses provide ``_index`` (key -> entry) and ``evictbuf``.
    """

    _index: dict
    evictbuf: EvictionBuffer

    def begin_writeback(self) -> tuple[Hashable, bytes, int] | None:
        """Claim the oldest staged entry for writing; returns (key, state, version)."""
        entry = self.evictbuf.next_writable()
        if entry is None:
            return None
        entry.writing = True
        return entry.key, entry.state, entry.version

    def finish_writeback(self, key, version: int, ok: bool = True) -> bool:
        """Complete a write started by ``begin_writeback``.

        A failed write leaves the entry staged for retry.  If the entry was
        reinstated or rewritten while the write was in flight, only the
        dirty bit is settled (clean iff the written version is current).
        Returns True if the entry left the cache.
        """
        entry = self._index.get(key)
        if entry is None:
            return False
        entry.writing = False
        if not ok:
            return False
        if entry.version != version:
            return False
        if entry.staged:
            self.evictbuf.unstage(key)
            del self._index[key]
            self._forget(entry)
            return True
        entry.dirty = False
        return False

    def drain(self, max_items: int, write: Callable[[Hashable, bytes], None]) -> int:
        """Synchronously write back up to ``max_items`` staged entries."""
        n = 0
        while n < max_items:
            job = self.begin_writeback()
            if job is None:
                break
            key, state, version = job
            try:
                write(key, state)
            except Exception:
                self.finish_writeback(key, version, ok=False)
                raise
            self.finish_writeback(key, version)
            n += 1
        return n

    def dirty_entries(self) -> list[CacheEntry]:
        return [e for e in self._index.values() if e.dirty]

    def mark_clean(self, key, version: int) -> None:
        entry = self._index.get(key)
        if entry is not None and entry.version == version:
            entry.dirty = False
            if entry.staged and not entry.writing:
                self.evictbuf.unstage(key)
                del self._index[key]
                self._forget(entry)

    def flush(self, write: Callable[[Hashable, bytes], None]) -> int:
        """Write every dirty entry (listed or staged); afterwards all are clean."""
        n = 0
        for entry in self.dirty_entries():
            write(entry.key, entry.state)
            self.mark_clean(entry.key, entry.version)
            n += 1
        return n

    def _forget(self, entry: CacheEntry) -> None:
        pass


class TimestampAwareCache(_WritebackMixin):
    """Event-time ordered cache for accessed and prefetched state.

    ``capacity`` bounds the number of listed entries; pass ``capacity_bytes``
    to bound the summed state size instead.  ``on_evict`` is called with each
    victim as it leaves the ordered list.
    """

    policy = "tac"

    def __init__(
        self,
        capacity: int,
        eviction_buffer_slots: int | None = None,
        capacity_bytes: int | None = None,
        on_evict: Callable[[CacheEntry], None] | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.capacity_bytes = capacity_bytes
        self.evictbuf = EvictionBuffer(eviction_buffer_slots or max(1, capacity // 16))
        self.on_evict = on_evict
        self._index: dict[Hashable, CacheEntry] = {}
        self._head: CacheEntry | None = None
        self._tail: CacheEntry | None = None
        self._len = 0
        self._bytes = 0
        self._seq = itertools.count(1)
        self.touch_absent = 0
        self.evictions = 0
        self.prefetched_unused = 0

    # -- queries ----------------------------------------------------------

    def __len__(self) -> int:
        return self._len

    def __contains__(self, key) -> bool:
        return key in self._index

    def in_list(self, key) -> bool:
        e = self._index.get(key)
        return e is not None and not e.staged

    def entry(self, key) -> CacheEntry | None:
        return self._index.get(key)

    @property
    def nbytes(self) -> int:
        return self._bytes

    def __iter__(self) -> Iterator[CacheEntry]:
        node = self._head
        while node is not None:
            yield node
            node = node.next

    def keys(self) -> list:
        return [e.key for e in self]

    def timestamps(self) -> list[int]:
        return [e.timestamp for e in self]

    # -- operations -------------------------------------------------------

    def get(self, key):
        """Return the cached state or None.  A staged entry is reinstated."""
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
        entry.used = True
        entry.origin = ACCESSED
        if entry.staged:
            self._reinstate(entry, access_time)
        else:
            self._reposition(entry, access_time)

    def touch_future(self, key, hint_time: int, hinter=None) -> None:
        entry = self._index.get(key)
        if entry is None:
            self.touch_absent += 1
            return
        if hinter is not None:
            entry.hinter = hinter
        if entry.staged:
            self._reinstate(entry, max(entry.timestamp, hint_time))
        elif hint_time > entry.timestamp:
            self._reposition(entry, hint_time)

    def insert(self, key, state, timestamp: int, origin: str = ACCESSED, dirty: bool = False, hinter=None) -> list[CacheEntry]:
        """Admit a new entry and trim from the tail; returns the victims in eviction order."""
        if key in self._index:
            raise KeyError(f"{key!r} already resident")
        entry = CacheEntry(key, state, timestamp, dirty, origin, hinter)
        self._index[key] = entry
        self._place(entry, None, None)
        self._len += 1
        self._bytes += entry.size
        try:
            return self._trim()
        except EvictionBufferFull:
            self._unlink(entry)
            self._len -= 1
            self._bytes -= entry.size
            del self._index[key]
            raise

    def write(self, key, state, access_time: int) -> None:
        entry = self._index.get(key)
        if entry is None:
            raise NotResident("write to non-resident state")
        # mutate first: if reinstating trims this very entry it leaves dirty, not lost
        self._bytes += (len(state) - entry.size) * (not entry.staged)
        entry.state = state
        entry.dirty = True
        entry.version += 1
        entry.used = True
        entry.origin = ACCESSED
        if entry.staged:
            self._reinstate(entry, access_time)
        else:
            self._reposition(entry, access_time)
            if self.capacity_bytes is not None:
                self._trim()

    # -- internals --------------------------------------------------------

    def _over(self) -> bool:
        if self.capacity_bytes is not None:
            return self._bytes > self.capacity_bytes and self._len > 0
        return self._len > self.capacity

    def _trim(self) -> list[CacheEntry]:
        if not self._over():
            return []
        # count dirty victims first so a full buffer fails before any mutation
        need = 0
        n, b = self._len, self._bytes
        node = self._tail
        while node is not None and (
            (self.capacity_bytes is not None and b > self.capacity_bytes) or
            (self.capacity_bytes is None and n > self.capacity)
        ):
            need += node.dirty
            n -= 1
            b -= node.size
            node = node.prev
        if need > self.evictbuf.room():
            raise EvictionBufferFull(f"need {need} slots, {self.evictbuf.room()} free")
        victims = []
        while self._over():
            victim = self._tail
            self._unlink(victim)
            self._len -= 1
            self._bytes -= victim.size
            self.evictions += 1
            if victim.origin == PREFETCHED and not victim.used:
                self.prefetched_unused += 1
            if victim.dirty:
                self.evictbuf.stage(victim)
            else:
                del self._index[victim.key]
            victims.append(victim)
            if self.on_evict is not None:
                self.on_evict(victim)
        return victims

    def _reinstate(self, entry: CacheEntry, new_time: int | None = None) -> None:
        """Move a staged entry back into the list (at ``new_time`` if given) and trim."""
        self.evictbuf.unstage(entry.key)
        old_time = entry.timestamp
        if new_time is not None:
            entry.timestamp = new_time
        self._place(entry, None, None)
        self._len += 1
        self._bytes += entry.size
        try:
            self._trim()
        except EvictionBufferFull:
            self._unlink(entry)
            self._len -= 1
            self._bytes -= entry.size
            entry.timestamp = old_time
            self.evictbuf.stage(entry)
            raise

    def _reposition(self, entry: CacheEntry, new_time: int) -> None:
        old_prev, old_next = entry.prev, entry.next
        self._unlink(entry)
        if new_time >= entry.timestamp:
            entry.timestamp = new_time
            self._place(entry, None, old_next)
        else:
            entry.timestamp = new_time
            self._place(entry, old_prev, None)

    def _place(self, entry: CacheEntry, above: CacheEntry | None, below: CacheEntry | None) -> None:
        """Link ``entry`` at its sorted position as the newest among equal timestamps.

        ``above`` (or the head when None) is known to sort strictly before the
        target spot and ``below`` (or the tail end) at or after it.  Walkers
        start from both ends and step alternately, so the cost is bounded by
        the shorter walk.
        """
        entry.seq = next(self._seq)
        t = entry.timestamp
        down = above.next if above is not None else self._head
        up = below.prev if below is not None else self._tail
        while True:
            if down is None or down.timestamp <= t:
                self._link_before(entry, down)
                return
            if up is None or up.timestamp > t:
                self._link_after(entry, up)
                return
            down = down.next
            up = up.prev

    def _link_before(self, entry: CacheEntry, nxt: CacheEntry | None) -> None:
        if nxt is None:
            self._link_after(entry, self._tail)
            return
        prv = nxt.prev
        entry.prev, entry.next = prv, nxt
        nxt.prev = entry
        if prv is None:
            self._head = entry
        else:
            prv.next = entry

    def _link_after(self, entry: CacheEntry, prv: CacheEntry | None) -> None:
        if prv is None:
            nxt = self._head
            entry.prev, entry.next = None, nxt
            if nxt is None:
                self._tail = entry
            else:
                nxt.prev = entry
            self._head = entry
            return
        nxt = prv.next
        entry.prev, entry.next = prv, nxt
        prv.next = entry
        if nxt is None:
            self._tail = entry
        else:
            nxt.prev = entry

    def _unlink(self, entry: CacheEntry) -> None:
        prv, nxt = entry.prev, entry.next
        if prv is None:
            self._head = nxt
        else:
            prv.next = nxt
        if nxt is None:
            self._tail = prv
        else:
            nxt.prev = prv
        entry.prev = entry.next = None
