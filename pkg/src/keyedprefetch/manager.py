"""Prefetching manager pieces: hints buffer, slack statistics, lookahead selection.

The manager lives inside a stateful subtask.  Hints land in a two-stage
buffer (unprocessed, then in flight), I/O workers pull the soonest-needed
key, and markers arriving on the data and hint channels give per-candidate
slack samples that drive lookahead selection.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Mapping, Sequence

import numpy as np

from .backend import NS_PER_MS
from .hints import FilterConfig

log = logging.getLogger(__name__)


def p99(samples) -> float:
    """Exact 99th percentile (inverted CDF, no interpolation)."""
    return percentile(samples, 99.0)


def percentile(samples, q: float) -> float:
    """Smallest sample whose empirical CDF reaches ``q`` percent.

    The rank uses exact fractions: ``np.percentile(..., "inverted_cdf")``
    turns ``0.999 * 1000`` into 999.0000000000001 and skips an order statistic.
    """
    arr = np.sort(np.asarray(samples, dtype=float))
    if arr.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(Fraction(str(q)) / 100 * arr.size))
    return float(arr[rank - 1])


@dataclass
class PrefetchConfig:
    hints_buffer_capacity: int = 4096
    io_pool_size: int = 4
    gamma_ms: float = 5.0
    min_samples: int = 30
    reservoir: int = 512
    sample_horizon_ms: float | None = 3000.0
    miss_threshold: float = 0.0
    marker_period_ms: float = 100.0
    eval_window_ms: float = 1000.0
    activation_trigger: int = 1
    marker_horizon: int = 64
    control_delay_ms: float = 1.0
    hint_delay_ms: float = 0.0
    watermark_dropping: bool = False
    watermark_delay_ms: float = 0.0
    lateness_threshold_ms: float = 0.0
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self) -> None:
        if isinstance(self.filter, dict):
            self.filter = FilterConfig(**self.filter)
        if self.hints_buffer_capacity < 1 or self.io_pool_size < 1:
            raise ValueError("hints buffer capacity and pool size must be >= 1")
        if self.min_samples < 1 or self.reservoir < 1:
            raise ValueError("min_samples and reservoir must be >= 1")
        if self.sample_horizon_ms is not None and self.sample_horizon_ms <= 0:
            raise ValueError("sample_horizon_ms must be > 0 or null")
        if not 0.0 <= self.miss_threshold <= 1.0:
            raise ValueError("miss_threshold must be in [0, 1]")


# ---------------------------------------------------------------------------
# hints buffer
# ---------------------------------------------------------------------------


class InFlight:
    __slots__ = ("event_time", "hinter", "done", "prefetch")

    def __init__(self, event_time: int, hinter, done, prefetch: bool):
        self.event_time = event_time
        self.hinter = hinter
        self.done = done
        self.prefetch = prefetch


class HintsBuffer:
    """Per-key deduplicated hints, unprocessed or in flight.

    ``unprocessed`` maps key to ``(event_time, hinter)``; a lazy-deletion
    heap yields the smallest event time first.  Synchronous fetches are
    registered in ``in_flight`` too, so a hint never duplicates ongoing I/O.
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.unprocessed: dict[Hashable, tuple[int, object]] = {}
        self.in_flight: dict[Hashable, InFlight] = {}
        self._heap: list[tuple[int, int, Hashable]] = []
        self._seq = itertools.count()
        self.overflow_evictions = 0
        self.dropped = 0

    def __len__(self) -> int:
        return len(self.unprocessed) + len(self.in_flight)

    def __contains__(self, key) -> bool:
        return key in self.unprocessed or key in self.in_flight

    def event_time(self, key) -> int | None:
        if key in self.unprocessed:
            return self.unprocessed[key][0]
        f = self.in_flight.get(key)
        return None if f is None else f.event_time

    def offer(self, key, event_time: int, hinter=None) -> bool:
        """Buffer a hint; returns False if it was dropped for lack of room."""
        f = self.in_flight.get(key)
        if f is not None:
            if event_time > f.event_time:
                f.event_time = event_time
            return True
        cur = self.unprocessed.get(key)
        if cur is not None:
            if event_time > cur[0]:
                self.unprocessed[key] = (event_time, hinter)
                self._push(event_time, key)
            return True
        if len(self) >= self.capacity:
            if self.pop_soonest() is None:
                self.dropped += 1
                return False
            self.overflow_evictions += 1
        self.unprocessed[key] = (event_time, hinter)
        self._push(event_time, key)
        return True

    def pop_soonest(self) -> tuple[Hashable, int, object] | None:
        """Remove and return the unprocessed hint with the smallest event time."""
        heap = self._heap
        while heap:
            ts, _, key = heapq.heappop(heap)
            cur = self.unprocessed.get(key)
            if cur is not None and cur[0] == ts:
                del self.unprocessed[key]
                return key, ts, cur[1]
        return None

    def take(self, key) -> tuple[int, object] | None:
        """Remove ``key`` from the unprocessed stage (its heap slot goes stale)."""
        return self.unprocessed.pop(key, None)

    def start(self, key, event_time: int, hinter, done, prefetch: bool = True) -> InFlight:
        if key in self.in_flight:
            raise KeyError(f"{key!r} already in flight")
        f = InFlight(event_time, hinter, done, prefetch)
        self.in_flight[key] = f
        return f

    def finish(self, key) -> InFlight:
        return self.in_flight.pop(key)

    def _push(self, ts: int, key) -> None:
        heapq.heappush(self._heap, (ts, next(self._seq), key))
        if len(self._heap) > 4 * len(self.unprocessed) + 64:
            self._heap = [(t, next(self._seq), k) for k, (t, _) in self.unprocessed.items()]
            heapq.heapify(self._heap)


# ---------------------------------------------------------------------------
# slack statistics and selection
# ---------------------------------------------------------------------------


class SlackStats:
    """Reservoirs of slack (G) per candidate and fetch latency (F), in ns.

    Samples are ``(time, value)`` pairs; with a ``horizon_ns`` only samples
    younger than the horizon count, so a latency shift is reflected within a
    few evaluation windows instead of after the reservoir turns over.
    Prefetch outcomes are kept as running totals and as per-window counts
    attributed to the lookahead that issued the hint.
    """

    def __init__(self, reservoir: int = 512, horizon_ns: int | None = None):
        self.reservoir = reservoir
        self.horizon_ns = horizon_ns
        self.g: dict[str, deque] = defaultdict(lambda: deque(maxlen=reservoir))
        self.f: deque = deque(maxlen=reservoir)
        self.prefetched_total = 0
        self.prefetched_used = 0
        self.prefetched_unused = 0
        self._win_total: dict = defaultdict(int)
        self._win_unused: dict = defaultdict(int)

    def add_g(self, candidate: str, g_ns: int, now: int = 0) -> None:
        self.g[candidate].append((now, g_ns))

    def add_f(self, f_ns: int, now: int = 0) -> None:
        self.f.append((now, f_ns))

    def prune(self, now: int) -> None:
        if self.horizon_ns is None:
            return
        cut = now - self.horizon_ns
        for dq in (self.f, *self.g.values()):
            while dq and dq[0][0] < cut:
                dq.popleft()

    def p99_g_ms(self, candidate: str) -> float | None:
        s = self.g.get(candidate)
        return p99([v for _, v in s]) / NS_PER_MS if s else None

    def p99_f_ms(self) -> float | None:
        return p99([v for _, v in self.f]) / NS_PER_MS if self.f else None

    def prefetched(self, hinter) -> None:
        self.prefetched_total += 1
        self._win_total[hinter] += 1

    def used(self, hinter) -> None:
        self.prefetched_used += 1

    def unused(self, hinter) -> None:
        self.prefetched_unused += 1
        self._win_unused[hinter] += 1

    def window(self, hinter) -> tuple[int, int]:
        return self._win_total.get(hinter, 0), self._win_unused.get(hinter, 0)

    def reset_window(self) -> None:
        self._win_total.clear()
        self._win_unused.clear()


def select_lookahead(
    candidates: Sequence[str],
    p99_g_ms: Mapping[str, float],
    p99_f_ms: float,
    gamma_ms: float,
) -> tuple[str | None, bool]:
    """Latest candidate whose p99 slack covers p99 fetch latency plus ``gamma``.

    ``candidates`` run source-side first.  Returns ``(choice, satisfied)``;
    when nobody qualifies the earliest candidate is returned with
    ``satisfied=False``.
    """
    if not candidates:
        return None, False
    bar = p99_f_ms + gamma_ms
    for c in reversed(candidates):
        g = p99_g_ms.get(c)
        if g is not None and g >= bar:
            return c, True
    return candidates[0], False


@dataclass
class Decision:
    discard: bool = False
    choice: str | None = None
    satisfied: bool = False
    miss_ratio: float = 0.0


class MarkerRounds:
    """Pairs data-channel and hint-channel marker copies per round into G samples."""

    def __init__(self, stats: SlackStats, horizon: int = 64):
        self.stats = stats
        self.horizon = horizon
        self.expected: dict[str, int] = defaultdict(int)
        self._t_data: dict[int, int] = {}
        self._copies: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self._t_hint: dict[int, dict[str, int]] = defaultdict(dict)
        self._latest = -1
        self.completed = 0
        self.incomplete = 0

    def expect(self, origin: str, copies: int = 1) -> None:
        self.expected[origin] += copies

    def on_hint_copy(self, round: int, origin: str, now: int) -> None:
        if round <= self._latest - self.horizon:
            return
        c = self._copies[round]
        c[origin] += 1
        if c[origin] == self.expected.get(origin, 0):
            self._t_hint[round][origin] = now
        self._check(round)

    def on_data(self, round: int, now: int) -> None:
        if round <= self._latest - self.horizon:
            return
        self._t_data[round] = now
        self._check(round)

    def _check(self, round: int) -> None:
        if round > self._latest:
            self._latest = round
            self._gc()
        t_data = self._t_data.get(round)
        hints = self._t_hint.get(round, {})
        if t_data is None or len(hints) < len(self.expected):
            return
        for origin, t_hint in hints.items():
            self.stats.add_g(origin, t_data - t_hint, t_data)
        self._forget(round)
        self.completed += 1

    def _forget(self, round: int) -> None:
        self._t_data.pop(round, None)
        self._copies.pop(round, None)
        self._t_hint.pop(round, None)

    def _gc(self) -> None:
        cutoff = self._latest - self.horizon
        stale = {r for r in itertools.chain(self._t_data, self._copies) if r <= cutoff}
        for r in stale:
            self._forget(r)
            self.incomplete += 1

    @property
    def pending(self) -> int:
        return len(set(self._t_data) | set(self._copies))


class PrefetchManager:
    """Hint intake, slack bookkeeping and per-window evaluation for one stateful subtask.

    The owning worker supplies the cache, wakes its I/O pool through
    ``notify_io`` and reports fetch latencies and data markers.
    """

    def __init__(self, cache, config: PrefetchConfig, state_ids: Sequence[int], notify_io, name: str = ""):
        from .backend import StateKey

        self._StateKey = StateKey
        self.cache = cache
        self.config = config
        self.state_ids = tuple(state_ids)
        self.notify_io = notify_io
        self.name = name
        self.buffer = HintsBuffer(config.hints_buffer_capacity)
        horizon = None if config.sample_horizon_ms is None else int(config.sample_horizon_ms * NS_PER_MS)
        self.stats = SlackStats(config.reservoir, horizon)
        self.rounds = MarkerRounds(self.stats, config.marker_horizon)
        self.max_event_time: int | None = None
        self.hints_received = 0
        self.hints_dropped_watermark = 0
        self.hints_touched = 0
        self.touch_blocked = 0
        self.no_candidate_diagnostics = 0

    # -- hint channel -----------------------------------------------------

    def watermark(self) -> int | None:
        if self.max_event_time is None:
            return None
        return self.max_event_time - int(self.config.watermark_delay_ms)

    def observe_event_time(self, t: int) -> None:
        if self.max_event_time is None or t > self.max_event_time:
            self.max_event_time = t

    def on_hint(self, hint) -> None:
        self.hints_received += 1
        if self.config.watermark_dropping:
            wm = self.watermark()
            if wm is not None and hint.event_time < wm - self.config.lateness_threshold_ms:
                self.hints_dropped_watermark += 1
                return
        cache = self.cache
        queued = False
        for sid in self.state_ids:
            sk = self._StateKey(hint.key, sid)
            if sk in cache:
                try:
                    cache.touch_future(sk, hint.event_time)
                    self.hints_touched += 1
                except Exception:  # reinstating a staged entry found the eviction buffer full
                    self.touch_blocked += 1
            else:
                queued |= self.buffer.offer(sk, hint.event_time, hint.origin)
        if queued:
            self.notify_io()

    def on_hint_marker(self, marker, now: int) -> None:
        self.rounds.on_hint_copy(marker.round, marker.origin, now)

    def on_data_marker(self, marker, now: int) -> None:
        self.rounds.on_data(marker.round, now)

    # -- evaluation -------------------------------------------------------

    def evaluate(self, remaining: Sequence[str], active: str | None, now: int | None = None) -> Decision:
        """Judge the current window; resets the window counters."""
        cfg = self.config
        if now is not None:
            self.stats.prune(now)
        d = Decision()
        if active is not None:
            total, unused = self.stats.window(active)
            if unused:
                d.miss_ratio = unused / total if total else 1.0
                d.discard = d.miss_ratio > cfg.miss_threshold
        self.stats.reset_window()
        ready = (
            remaining
            and len(self.stats.f) >= cfg.min_samples
            and all(len(self.stats.g.get(c, ())) >= cfg.min_samples for c in remaining)
        )
        if ready:
            g = {c: self.stats.p99_g_ms(c) for c in remaining}
            d.choice, d.satisfied = select_lookahead(remaining, g, self.stats.p99_f_ms(), cfg.gamma_ms)
            if not d.satisfied:
                self.no_candidate_diagnostics += 1
                log.info("%s: no candidate covers p99(F)+gamma; keeping %s", self.name, d.choice)
        return d
