"""Count-Min Sketch with saturating b-bit counters and periodic aging.

Used by hint extractors as a coarse hot-key filter: keys whose every
touched counter has reached the threshold are considered hot and get no
prefetch hints, since they are almost certainly cache-resident already.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .hashing import MASTER_SEED, key_hash, row_seeds


def _dtype_for(bits: int) -> np.dtype:
    if bits <= 8:
        return np.dtype(np.uint8)
    if bits <= 16:
        return np.dtype(np.uint16)
    if bits <= 32:
        return np.dtype(np.uint32)
    raise ValueError("counter width above 32 bits is not supported")


class CountMinSketch:
    """``depth`` x ``width`` saturating counters.

    ``threshold`` is the hot-key bar T and ``aging_interval`` the number of
    updates between halving passes (Δ).
    """

    def __init__(
        self,
        depth: int = 4,
        width: int = 10_000,
        bits: int = 8,
        threshold: int = 20,
        aging_interval: int | None = 1000,
        seed: int = MASTER_SEED,
    ):
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be positive")
        if not 1 <= bits <= 32:
            raise ValueError("bits must be in [1, 32]")
        if aging_interval is not None and aging_interval < 1:
            raise ValueError("aging_interval must be positive or None")
        self.depth = depth
        self.width = width
        self.bits = bits
        self.cap = (1 << bits) - 1
        self.threshold = threshold
        self.aging_interval = aging_interval
        self.counters = np.zeros((depth, width), dtype=_dtype_for(bits))
        self.seeds = row_seeds(depth, seed)
        self.records_since_age = 0
        self.agings = 0

    @property
    def nbytes(self) -> int:
        """Memory held by the counter array at the declared bit width."""
        return self.depth * self.width * self.bits // 8

    def cells(self, key: bytes) -> np.ndarray:
        """Column touched in each row by ``key``."""
        return _kernels.row_indices(np.uint64(key_hash(key)), self.seeds, self.width)

    def update(self, key: bytes) -> None:
        _kernels.cms_add(self.counters, np.uint64(key_hash(key)), self.seeds, self.cap)
        self.records_since_age += 1
        if self.aging_interval is not None and self.records_since_age >= self.aging_interval:
            self.age()

    def age(self) -> None:
        _kernels.cms_halve(self.counters)
        self.records_since_age = 0
        self.agings += 1

    def estimate(self, key: bytes) -> int:
        return int(_kernels.cms_min(self.counters, np.uint64(key_hash(key)), self.seeds))

    def is_hot(self, key: bytes) -> bool:
        # All d counters must reach T, i.e. the min-row estimate does.
        return self.estimate(key) >= self.threshold

    def replay(self, keys: list[bytes]) -> np.ndarray:
        """Feed ``keys`` in order; return a mask of records that would emit a hint."""
        hashes = np.fromiter((key_hash(k) for k in keys), dtype=np.uint64, count=len(keys))
        delta = self.aging_interval if self.aging_interval is not None else np.iinfo(np.int64).max
        mask, since = _kernels.cms_replay(
            self.counters, hashes, self.seeds, self.cap, self.threshold, delta, self.records_since_age
        )
        self.records_since_age = int(since)
        return mask
