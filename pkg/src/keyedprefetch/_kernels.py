"""Numeric inner loops for the frequency filter and key routing.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical results.  The numba path is used unless the
environment variable ``KEYEDPREFETCH_PURE_NUMPY`` is set to a truthy value
(or numba cannot be imported).  ``benchmarks/bench_kernels.py`` times both.
"""

from __future__ import annotations

import os

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
S30 = np.uint64(30)
S27 = np.uint64(27)
S31 = np.uint64(31)


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# pure numpy path
# ---------------------------------------------------------------------------


def _np_mix(x: np.ndarray) -> np.ndarray:
    z = x + GOLDEN
    z = (z ^ (z >> S30)) * MIX1
    z = (z ^ (z >> S27)) * MIX2
    return z ^ (z >> S31)


def np_row_indices(h: int, seeds: np.ndarray, width: int) -> np.ndarray:
    x = np.full(seeds.shape[0], h, dtype=np.uint64) ^ seeds
    return (_np_mix(x) % np.uint64(width)).astype(np.int64)


def np_cms_add(counters: np.ndarray, h: int, seeds: np.ndarray, cap: int) -> int:
    rows = np.arange(counters.shape[0])
    cols = np_row_indices(h, seeds, counters.shape[1])
    cur = counters[rows, cols]
    new = np.where(cur < cap, cur + 1, cur).astype(counters.dtype)
    counters[rows, cols] = new
    return int(new.min())


def np_cms_min(counters: np.ndarray, h: int, seeds: np.ndarray) -> int:
    rows = np.arange(counters.shape[0])
    cols = np_row_indices(h, seeds, counters.shape[1])
    return int(counters[rows, cols].min())


def np_cms_halve(counters: np.ndarray) -> None:
    counters >>= 1


def np_cms_replay(
    counters: np.ndarray,
    hashes: np.ndarray,
    seeds: np.ndarray,
    cap: int,
    threshold: int,
    delta: int,
    since_age: int,
) -> tuple[np.ndarray, int]:
    emit = np.zeros(hashes.shape[0], dtype=np.bool_)
    for n in range(hashes.shape[0]):
        est = np_cms_add(counters, int(hashes[n]), seeds, cap)
        since_age += 1
        if since_age >= delta:
            counters >>= 1
            since_age = 0
            est = np_cms_min(counters, int(hashes[n]), seeds)
        emit[n] = est < threshold
    return emit, since_age


def np_route_many(hashes: np.ndarray, parallelism: int) -> np.ndarray:
    return (hashes.astype(np.uint64) % np.uint64(parallelism)).astype(np.int64)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

try:
    if _flag("KEYEDPREFETCH_PURE_NUMPY"):
        raise ImportError("numba disabled by KEYEDPREFETCH_PURE_NUMPY")
    from numba import njit
except ImportError:  # pragma: no cover - exercised via env flag in CI
    njit = None


if njit is not None:

    @njit(cache=True, inline="always")
    def _nb_mix(x):
        z = x + GOLDEN
        z = (z ^ (z >> S30)) * MIX1
        z = (z ^ (z >> S27)) * MIX2
        return z ^ (z >> S31)

    @njit(cache=True)
    def nb_row_indices(h, seeds, width):
        out = np.empty(seeds.shape[0], dtype=np.int64)
        hu = np.uint64(h)
        w = np.uint64(width)
        for i in range(seeds.shape[0]):
            out[i] = np.int64(_nb_mix(hu ^ seeds[i]) % w)
        return out

    @njit(cache=True)
    def nb_cms_add(counters, h, seeds, cap):
        hu = np.uint64(h)
        w = np.uint64(counters.shape[1])
        est = np.int64(cap) + 1
        for i in range(counters.shape[0]):
            j = np.int64(_nb_mix(hu ^ seeds[i]) % w)
            c = np.int64(counters[i, j])
            if c < cap:
                c += 1
                counters[i, j] = c
            if c < est:
                est = c
        return est

    @njit(cache=True)
    def nb_cms_min(counters, h, seeds):
        hu = np.uint64(h)
        w = np.uint64(counters.shape[1])
        est = np.int64(-1)
        for i in range(counters.shape[0]):
            j = np.int64(_nb_mix(hu ^ seeds[i]) % w)
            c = np.int64(counters[i, j])
            if est < 0 or c < est:
                est = c
        return est

    @njit(cache=True)
    def nb_cms_halve(counters):
        for i in range(counters.shape[0]):
            for j in range(counters.shape[1]):
                counters[i, j] >>= 1

    @njit(cache=True)
    def nb_cms_replay(counters, hashes, seeds, cap, threshold, delta, since_age):
        emit = np.zeros(hashes.shape[0], dtype=np.bool_)
        for n in range(hashes.shape[0]):
            est = nb_cms_add(counters, hashes[n], seeds, cap)
            since_age += 1
            if since_age >= delta:
                nb_cms_halve(counters)
                since_age = 0
                est = nb_cms_min(counters, hashes[n], seeds)
            emit[n] = est < threshold
        return emit, since_age

    @njit(cache=True)
    def nb_route_many(hashes, parallelism):
        out = np.empty(hashes.shape[0], dtype=np.int64)
        p = np.uint64(parallelism)
        for i in range(hashes.shape[0]):
            out[i] = np.int64(np.uint64(hashes[i]) % p)
        return out

    USING_NUMBA = True
    row_indices = nb_row_indices
    cms_add = nb_cms_add
    cms_min = nb_cms_min
    cms_halve = nb_cms_halve
    cms_replay = nb_cms_replay
    route_many = nb_route_many
else:
    USING_NUMBA = False
    row_indices = np_row_indices
    cms_add = np_cms_add
    cms_min = np_cms_min
    cms_halve = np_cms_halve
    cms_replay = np_cms_replay
    route_many = np_route_many


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"
