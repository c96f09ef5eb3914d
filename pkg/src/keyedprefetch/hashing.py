"""Key hashing and partition routing.

Data tuples and prefetch hints are routed with the same function so that a
stateful subtask only ever sees hints for its own key partition.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

MASTER_SEED = 0x5EED_CAFE


@lru_cache(maxsize=1 << 17)
def key_hash(key: bytes) -> int:
    """Stable 64-bit hash of a byte-string key (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def route(key: bytes, parallelism: int) -> int:
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if parallelism == 1:
        return 0
    return key_hash(key) % parallelism


def row_seeds(rows: int, seed: int = MASTER_SEED) -> np.ndarray:
    """Derive ``rows`` independent 64-bit seeds from a master seed."""
    ss = np.random.SeedSequence(seed)
    return ss.generate_state(rows, dtype=np.uint64)
