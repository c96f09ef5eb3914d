"""Synthetic keyed workloads: Zipf, churning hot set, or uniform key draws.

Records are generated in numpy chunks and yielded lazily as
``(arrival_ns, Tuple)``.  Keys are ``b"k<index>"``; payloads carry
``stream|key index|sequence|`` padded to ``payload_size`` bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from ..backend import NS_PER_MS
from ..dataflow import Tuple

DISTRIBUTIONS = ("zipf", "hot-set", "uniform")
_CHUNK = 8192


@dataclass
class WorkloadSpec:
    key_space: int = 100_000
    distribution: str = "hot-set"
    alpha: float = 1.0
    p_hot: float = 0.5
    hot_set_size: int = 1
    churn_interval_ms: float = 1000.0
    rate: float | None = 1000.0
    arrivals: str = "poisson"
    num_tuples: int | None = None
    duration_ms: float | None = None
    payload_size: int = 200
    out_of_order_fraction: float = 0.0
    max_lateness_ms: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.key_space < 1:
            raise ValueError("key_space must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        for name in ("p_hot", "out_of_order_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 1 <= self.hot_set_size <= self.key_space:
            raise ValueError("hot_set_size must be in [1, key_space]")
        if self.churn_interval_ms <= 0:
            raise ValueError("churn_interval_ms must be > 0")
        if self.rate is not None and self.rate <= 0:
            raise ValueError("rate must be > 0 or null")
        if self.arrivals not in ("poisson", "constant"):
            raise ValueError("arrivals must be poisson or constant")
        if self.max_lateness_ms < 0 or self.payload_size < 0:
            raise ValueError("max_lateness_ms and payload_size must be >= 0")
        if self.out_of_order_fraction > 0 and self.max_lateness_ms < 1:
            raise ValueError("out-of-order injection needs max_lateness_ms >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def key_of(index: int) -> bytes:
    return b"k%d" % index


def parse_payload(payload: bytes) -> tuple[int, int, int]:
    """Return ``(stream, key index, sequence)`` from a generated payload."""
    stream, idx, seq, _ = payload.split(b"|", 3)
    return int(stream), int(idx), int(seq)


class WorkloadGenerator:
    """Deterministic record stream for one source.

    Counters (``emitted``, ``hot_emitted``, ``late_emitted``) are updated as
    records are drawn, so tests can compare against the generator's own view.
    """

    def __init__(self, spec: WorkloadSpec, stream: int = 0, limit: int | None = None):
        self.spec = spec
        self.stream = stream
        self.limit = limit if limit is not None else spec.num_tuples
        self.rng = np.random.default_rng([spec.seed, stream, 0x5EED])
        self.emitted = 0
        self.hot_emitted = 0
        self.late_emitted = 0
        self._cdf = None
        self._perm = None
        if spec.distribution == "zipf":
            w = 1.0 / np.arange(1, spec.key_space + 1, dtype=float) ** spec.alpha
            self._cdf = np.cumsum(w / w.sum())
            self._perm = self.rng.permutation(spec.key_space)
        self._hot: np.ndarray | None = None
        self._hot_epoch = -1
        self._filler = b"x" * spec.payload_size

    def __iter__(self) -> Iterator[tuple[int, Tuple]]:
        spec = self.spec
        now = 0.0
        end_ns = None if spec.duration_ms is None else spec.duration_ms * NS_PER_MS
        gap = 0.0 if spec.rate is None else 1e9 / spec.rate
        seq = 0
        while True:
            n = _CHUNK
            if self.limit is not None:
                n = min(n, self.limit - seq)
                if n <= 0:
                    return
            if spec.rate is None:
                gaps = np.zeros(n)
            elif spec.arrivals == "poisson":
                gaps = self.rng.exponential(gap, n)
            else:
                gaps = np.full(n, gap)
            times = now + np.cumsum(gaps)
            now = float(times[-1])
            keys, hot = self._draw(times)
            late = self.rng.random(n) < spec.out_of_order_fraction
            lateness = self.rng.integers(1, max(2, int(spec.max_lateness_ms) + 1), n)
            for i in range(n):
                at = int(times[i])
                if end_ns is not None and at >= end_ns:
                    return
                et = at // NS_PER_MS
                if late[i] and et > 0:
                    et = max(0, et - int(lateness[i]))
                    self.late_emitted += 1
                idx = int(keys[i])
                self.hot_emitted += bool(hot[i])
                payload = b"%d|%d|%d|" % (self.stream, idx, seq) + self._filler
                self.emitted += 1
                yield at, Tuple(int(et), key_of(idx), payload, 0, seq)
                seq += 1

    def _draw(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        spec, rng, n = self.spec, self.rng, len(times)
        if spec.distribution == "uniform":
            return rng.integers(0, spec.key_space, n), np.zeros(n, bool)
        if spec.distribution == "zipf":
            ranks = np.searchsorted(self._cdf, rng.random(n), side="right")
            ranks = np.minimum(ranks, spec.key_space - 1)
            return self._perm[ranks], ranks == 0
        # hot set: re-drawn every churn interval of generation time
        hot = rng.random(n) < spec.p_hot
        keys = rng.integers(0, spec.key_space, n)
        picks = rng.integers(0, spec.hot_set_size, n)
        epochs = (times // (spec.churn_interval_ms * NS_PER_MS)).astype(np.int64)
        for i in np.flatnonzero(hot):
            if epochs[i] != self._hot_epoch:
                self._hot_epoch = int(epochs[i])
                self._hot = rng.choice(spec.key_space, spec.hot_set_size, replace=False)
            keys[i] = self._hot[picks[i]]
        return keys, hot


def generate(spec: WorkloadSpec, stream: int = 0, limit: int | None = None) -> WorkloadGenerator:
    return WorkloadGenerator(spec, stream, limit)
