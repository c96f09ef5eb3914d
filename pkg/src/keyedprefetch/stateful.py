"""Stateful subtask: cache, backend, I/O pool, and the per-mode data path.

Modes:

* ``cache-lru`` / ``cache-clock`` / ``cache-tac``: synchronous fetch on miss.
* ``async-io``: a miss parks the tuple and the worker moves on to other keys.
* ``keyed-prefetching``: TAC plus the prefetching manager fed by hints.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .backend import BackendError, BackendProfile, BackendShutdown, NS_PER_MS, SimBackend, StateKey
from .baselines import make_cache
from .dataflow import Marker, Signal, Tuple, Worker
from .manager import PrefetchConfig, PrefetchManager
from .tac import ACCESSED, PREFETCHED, EvictionBufferFull, NotResident

log = logging.getLogger(__name__)

CACHE_LRU, CACHE_CLOCK, CACHE_TAC = "cache-lru", "cache-clock", "cache-tac"
ASYNC_IO, KEYED_PREFETCHING = "async-io", "keyed-prefetching"
MODES = (CACHE_LRU, CACHE_CLOCK, CACHE_TAC, ASYNC_IO, KEYED_PREFETCHING)
_POLICY = {CACHE_LRU: "lru", CACHE_CLOCK: "clock", CACHE_TAC: "tac", KEYED_PREFETCHING: "tac"}


@dataclass
class StateConfig:
    mode: str = KEYED_PREFETCHING
    cache_capacity: int = 5000
    eviction_buffer_slots: int | None = None
    io_pool_size: int = 4
    async_policy: str = "lru"
    max_parked: int = 10_000
    backend: BackendProfile = field(default_factory=BackendProfile)
    preload: Callable[[StateKey], bytes | None] | None = None
    prefetch: PrefetchConfig = field(default_factory=PrefetchConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.async_policy not in ("lru", "clock"):
            raise ValueError("async_policy must be lru or clock")
        if self.cache_capacity < 1 or self.io_pool_size < 1 or self.max_parked < 1:
            raise ValueError("capacities and pool size must be >= 1")

    @property
    def policy(self) -> str:
        return self.async_policy if self.mode == ASYNC_IO else _POLICY[self.mode]


class StatefulWorker(Worker):
    """One keyed-stateful subtask with its own backend instance and cache."""

    def __init__(self, engine, spec, index: int, config: StateConfig, controller=None):
        super().__init__(engine, spec, index)
        self.config = config
        self.controller = controller
        self.backend = SimBackend(engine.env, config.backend, engine.rng_for(f"backend:{self.name}"), config.preload)
        self.cache = make_cache(config.policy, config.cache_capacity, config.eviction_buffer_slots, on_evict=self._on_evict)
        self.io_signal = Signal(self.env)
        self.space = Signal(self.env)
        self.manager: PrefetchManager | None = None
        if config.mode == KEYED_PREFETCHING:
            self.manager = PrefetchManager(self.cache, config.prefetch, spec.state_ids, self.io_signal.notify, self.name)
        self.async_mode = config.mode == ASYNC_IO
        self.parked: dict[bytes, deque] = {}
        self.n_parked = 0
        self.ready: deque = deque()
        self._async_fetching: set = set()
        self._fetch_wait: dict[bytes, None] = {}
        self.async_refetches = 0
        # outstanding async fetches are capped so fetched state is not
        # evicted by other fetches before its parked tuples run
        self.max_async_fetches = max(1, config.cache_capacity // (2 * len(spec.state_ids)))
        self.seen_keys: set = set()
        self.hits = 0
        self.cold_misses = 0
        self.late_hint_misses = 0
        self.io_stall_ns = 0
        self.buffer_full_waits = 0
        self.write_failures = 0
        self.fetches = 0
        pool = config.prefetch.io_pool_size if self.manager is not None else config.io_pool_size
        for _ in range(pool):
            self.env.process(self._io_loop())

    # -- plumbing ---------------------------------------------------------

    def expect_hint_copies(self, lookahead: str) -> None:
        if self.manager is not None:
            self.manager.rounds.expect(lookahead)

    def deliver_hint(self, item, channel=None) -> None:
        if self.manager is None:
            return
        if isinstance(item, Marker):
            self.manager.on_hint_marker(item, self.engine.now_ns())
        else:
            self.manager.on_hint(item)

    @property
    def backlog(self) -> int:
        return len(self.inbox) + self.n_parked

    def is_idle(self) -> bool:
        return (
            not self.inbox and not self._busy and not self.n_parked and not self.ready
            and not len(self.cache.evictbuf)
            and (self.manager is None or not len(self.manager.buffer))
        )

    def state_keys(self, t: Tuple) -> list[StateKey]:
        return [StateKey(t.key, sid) for sid in self.spec.state_ids]

    def initial_state(self, sk: StateKey) -> bytes:
        init = self.spec.initial_state
        return init(sk) if callable(init) else init

    def _on_evict(self, victim) -> None:
        if victim.dirty:
            self.io_signal.notify()
        if self.manager is not None and victim.origin == PREFETCHED and not victim.used:
            self.manager.stats.unused(victim.hinter)

    # -- main loop --------------------------------------------------------

    def run(self):
        if self.async_mode:
            yield from self._run_async()
            return
        inbox = self.inbox
        while True:
            if not inbox:
                yield self.wake.wait()
                continue
            item, arrived = inbox.popleft()
            self._busy = 1
            if isinstance(item, Marker):
                if self.manager is not None and self._marker_complete(item):
                    self.manager.on_data_marker(item, arrived)
                yield from self.on_marker(item)
            else:
                yield from self._process(item, arrived)
            self._busy = 0

    def _marker_complete(self, m: Marker) -> bool:
        # the copy that completes alignment is the data-side arrival of the round
        return self._marker_counts.get(m.round, 0) + 1 >= self.n_inputs

    def _process(self, t: Tuple, arrived: int):
        start = self.env.now
        if self.manager is not None:
            self.manager.observe_event_time(t.event_time)
        states = {}
        for sk in self.state_keys(t):
            states[sk.state_id] = yield from self._access(sk, t)
        yield from self._compute(t, arrived, start, states)

    def _compute(self, t: Tuple, arrived: int, start: int, states: dict):
        p = self.service_ns()
        if p:
            yield self.env.timeout(p)
        self.busy_ns += p
        self.processed += 1
        res = self.spec.fn(t, states) if self.spec.fn is not None else ([t], {})
        outs, updates = res if isinstance(res, tuple) else (res, {})
        if outs is None:
            outs = []
        elif isinstance(outs, Tuple):
            outs = [outs]
        else:
            outs = list(outs)
        for sid, value in (updates or {}).items():
            yield from self._write(StateKey(t.key, sid), value, t.event_time)
        if t.trace is not None:
            stamp = (self.op, arrived, start, self.env.now)
            for o in outs:
                if o.trace is None:
                    o.trace = list(t.trace)
                o.trace.append(stamp)
        self.finish(t, outs)

    # -- state access -----------------------------------------------------

    def _access(self, sk: StateKey, t: Tuple):
        cache, mgr = self.cache, self.manager
        waited = False
        while True:
            entry = cache.entry(sk)
            if entry is not None:
                if mgr is not None and entry.origin == PREFETCHED and not entry.used:
                    mgr.stats.used(entry.hinter)
                yield from self._retry(cache.touch_access, sk, t.event_time)
                if not waited:
                    self.hits += 1
                return entry.state
            if mgr is not None:
                f = mgr.buffer.in_flight.get(sk)
                if f is not None:
                    if not waited:
                        self.late_hint_misses += 1
                        waited = True
                    t0 = self.env.now
                    yield f.done
                    self.io_stall_ns += self.env.now - t0
                    continue
                if mgr.buffer.take(sk) is not None:
                    self.late_hint_misses += 1
                elif not waited:
                    self.cold_misses += 1
                    if self.controller is not None:
                        self.controller.on_cold_miss(self.op)
            elif not waited:
                self.cold_misses += 1
            t0 = self.env.now
            state = yield from self._fetch(sk, t.event_time, ACCESSED, None)
            self.io_stall_ns += self.env.now - t0
            return state

    def _fetch(self, sk: StateKey, ts: int, origin: str, hinter, io_context: bool = False, on_insert=None):
        """Read ``sk`` from the backend and insert it into the cache.

        ``on_insert`` runs only if this fetch admitted the entry (not when a
        racing write made it resident first).
        """
        mgr = self.manager
        f = None
        if mgr is not None:
            f = mgr.buffer.start(sk, ts, hinter, self.env.event(), prefetch=origin == PREFETCHED)
        begin = self.env.now
        try:
            value = yield from self.backend.get(sk)
        except BaseException:
            if f is not None:
                mgr.buffer.finish(sk)
                f.done.succeed()
            raise
        self.fetches += 1
        if mgr is not None:
            mgr.stats.add_f(self.env.now - begin, self.env.now)
        self.seen_keys.add(sk)
        if value is None:
            value = self.initial_state(sk)
        future = f.event_time if f is not None else ts
        insert_ts = future if origin == PREFETCHED else ts
        while True:
            resident = self.cache.entry(sk)
            if resident is not None:
                # a write inserted freshly computed state while we read; it is newer
                value = resident.state
                if future > resident.timestamp:
                    yield from self._retry(self.cache.touch_future, sk, future, io_context=io_context)
                break
            try:
                self.cache.insert(sk, value, insert_ts, origin, False, hinter)
                if on_insert is not None:
                    on_insert()
                break
            except EvictionBufferFull:
                yield from self._make_room(io_context)
        if resident is None and origin == ACCESSED and future > ts:
            self.cache.touch_future(sk, future)
        if f is not None:
            mgr.buffer.finish(sk)
            f.done.succeed()
        return value

    def _write(self, sk: StateKey, value: bytes, ts: int):
        while True:
            try:
                self.cache.write(sk, value, ts)
                return
            except NotResident:
                try:
                    self.cache.insert(sk, value, ts, ACCESSED, True)
                    return
                except EvictionBufferFull:
                    # residency is re-checked after waiting: a fetch may land meanwhile
                    yield from self._make_room(False)
            except EvictionBufferFull:
                yield from self._make_room(False)

    def _retry(self, op, *args, io_context: bool = False):
        while True:
            try:
                return op(*args)
            except EvictionBufferFull:
                yield from self._make_room(io_context)

    def _make_room(self, io_context: bool):
        self.buffer_full_waits += 1
        if io_context:
            job = self.cache.begin_writeback()
            if job is not None:
                yield from self._writeback(job)
                return
        self.io_signal.notify()
        yield self.space.wait()

    # -- I/O pool ---------------------------------------------------------

    def _next_job(self):
        mgr = self.manager
        pending = mgr is not None and mgr.buffer.unprocessed
        if pending and not self.cache.evictbuf.full:
            return "prefetch", mgr.buffer.pop_soonest()
        wb = self.cache.begin_writeback()
        if wb is not None:
            return "write", wb
        if pending:
            return "prefetch", mgr.buffer.pop_soonest()
        return None

    def _io_loop(self):
        while True:
            job = self._next_job()
            if job is None or job[1] is None:
                yield self.io_signal.wait()
                continue
            try:
                if job[0] == "write":
                    yield from self._writeback(job[1])
                else:
                    yield from self._prefetch(*job[1])
            except BackendShutdown:
                return

    def _writeback(self, job):
        key, state, version = job
        try:
            yield from self.backend.put(key, state)
            ok = True
        except BackendShutdown:
            self.cache.finish_writeback(key, version, ok=False)
            raise
        except BackendError:
            ok = False
            self.write_failures += 1
        self.cache.finish_writeback(key, version, ok)
        self.space.notify()
        if not ok:
            yield self.env.timeout(NS_PER_MS)

    def _prefetch(self, sk: StateKey, ts: int, hinter):
        if sk in self.cache:
            self.cache.touch_future(sk, ts)
            return
        stats = self.manager.stats
        yield from self._fetch(sk, ts, PREFETCHED, hinter, io_context=True, on_insert=lambda: stats.prefetched(hinter))

    # -- async I/O baseline -----------------------------------------------

    def _run_async(self):
        inbox, ready, cache = self.inbox, self.ready, self.cache
        while True:
            if ready:
                key = ready.popleft()
                q = self.parked.get(key)
                fetched = True
                while q:
                    t, arrived = q[0]
                    missing = [sk for sk in self.state_keys(t) if sk not in cache]
                    if missing and not fetched:
                        self._start_async_fetch(key, missing)
                        break
                    q.popleft()
                    self.n_parked -= 1
                    self._busy = 1
                    # states evicted again since the fetch are read inline
                    yield from self._process_resident(t, arrived, hit=False)
                    self._busy = 0
                    fetched = False
                if q is not None and not q:
                    del self.parked[key]
                continue
            if inbox and self.n_parked < self.config.max_parked:
                item, arrived = inbox.popleft()
                self._busy = 1
                if isinstance(item, Marker):
                    yield from self.on_marker(item)
                else:
                    q = self.parked.get(item.key)
                    if q is not None:
                        q.append((item, arrived))
                        self.n_parked += 1
                    else:
                        missing = [sk for sk in self.state_keys(item) if sk not in cache]
                        if missing:
                            self.cold_misses += 1
                            self.parked[item.key] = deque([(item, arrived)])
                            self.n_parked += 1
                            self._start_async_fetch(item.key, missing)
                        else:
                            yield from self._process_resident(item, arrived)
                self._busy = 0
                continue
            yield self.wake.wait()

    def _process_resident(self, t: Tuple, arrived: int, hit: bool = True):
        """Serve a tuple whose states were resident when it was dequeued.

        A touch can wait for eviction-buffer room, and a concurrent async
        fetch may evict a sibling state meanwhile (or the states may simply
        not fit together); anything found missing is read inline.
        """
        start = self.env.now
        states = {}
        for sk in self.state_keys(t):
            entry = self.cache.entry(sk)
            if entry is None:
                hit = False
                self.async_refetches += 1
                t0 = self.env.now
                states[sk.state_id] = yield from self._fetch(sk, t.event_time, ACCESSED, None)
                self.io_stall_ns += self.env.now - t0
            else:
                yield from self._retry(self.cache.touch_access, sk, t.event_time)
                states[sk.state_id] = entry.state
        self.hits += hit
        yield from self._compute(t, arrived, start, states)

    def _start_async_fetch(self, key: bytes, missing: list[StateKey] | None = None) -> None:
        if key in self._async_fetching:
            return
        if len(self._async_fetching) >= self.max_async_fetches:
            self._fetch_wait.setdefault(key)
            return
        self._async_fetching.add(key)
        self.env.process(self._async_fetch(key))

    def _async_fetch(self, key: bytes):
        t0 = self.env.now
        for sk in self.state_keys(self.parked[key][0][0]):
            if sk in self.cache:
                continue
            ts = self.parked[key][0][0].event_time
            yield from self._fetch(sk, ts, ACCESSED, None, io_context=True)
        self.io_stall_ns += self.env.now - t0
        self._async_fetching.discard(key)
        self.ready.append(key)
        if self._fetch_wait:
            nxt = next(iter(self._fetch_wait))
            del self._fetch_wait[nxt]
            self._start_async_fetch(nxt)
        self.wake.notify()

    # -- shutdown ---------------------------------------------------------

    def flush(self) -> int:
        """Write every dirty entry straight to the backend store (quiescent subtask only)."""
        return self.cache.flush(self.backend.load_value)
