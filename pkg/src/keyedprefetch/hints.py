"""Prefetch hints and the per-lookahead extractor that emits them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .sketch import CountMinSketch

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class PrefetchHint:
    """Expected access to ``key`` at event time ``event_time``.

    ``origin`` names the lookahead operator that produced the hint so that
    unused prefetches can be charged to it.
    """

    key: bytes
    event_time: int
    origin: str | None = None


@dataclass
class FilterConfig:
    enabled: bool = True
    depth: int = 4
    width: int = 10_000
    bits: int = 8
    threshold: int = 20
    aging_interval: int | None = 1000

    def make(self, seed: int) -> CountMinSketch | None:
        if not self.enabled:
            return None
        return CountMinSketch(self.depth, self.width, self.bits, self.threshold, self.aging_interval, seed)


@dataclass
class HintExtractor:
    """Runs inside one lookahead subtask on the outputs it forwards.

    The sketch is updated with every extracted key before the hot test, so
    a key becomes hot on the record that pushes its estimate to T.
    """

    lookahead: str
    target: str
    key_fn: Callable
    sketch: CountMinSketch | None = None
    active: bool = False
    extracted: int = 0
    filtered: int = 0
    emitted: int = 0
    failures: int = 0
    _warned: bool = field(default=False, repr=False)

    def process(self, record) -> PrefetchHint | None:
        try:
            key = self.key_fn(record)
        except Exception as exc:  # user code; a bad record must not stall the pipeline
            self.failures += 1
            if not self._warned:
                log.warning("key extractor %s->%s failed: %s", self.lookahead, self.target, exc)
                self._warned = True
            return None
        self.extracted += 1
        if self.sketch is not None:
            self.sketch.update(key)
            if self.sketch.is_hot(key):
                self.filtered += 1
                return None
        self.emitted += 1
        return PrefetchHint(key, record.event_time, self.lookahead)
