"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 3] [--json out.json]

Both paths are checked for identical results before timing.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from keyedprefetch import _kernels as K
from keyedprefetch.hashing import row_seeds


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200_000, help="records per replay")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    hashes = rng.integers(0, 2**63, args.n, dtype=np.uint64)
    # skewed stream so some keys cross the threshold
    hashes[rng.random(args.n) < 0.3] = hashes[0]
    seeds = row_seeds(4)

    def replay(fn, n):
        c = np.zeros((4, 10_000), dtype=np.uint8)
        return fn(c, hashes[:n], seeds, 255, 20, 1000, 0)

    impls = {"numpy": (K.np_cms_replay, K.np_route_many)}
    if K.USING_NUMBA:
        impls["numba"] = (K.nb_cms_replay, K.nb_route_many)
        replay(K.nb_cms_replay, 10)  # compile
        K.nb_route_many(hashes[:10], 7)
        small = min(args.n, 20_000)
        a, b = replay(K.np_cms_replay, small), replay(K.nb_cms_replay, small)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1], "cms replay differs between paths"
        assert np.array_equal(K.np_route_many(hashes, 7), K.nb_route_many(hashes, 7)), "routing differs"

    # the numpy replay is a Python loop; time it on a slice and scale
    np_n = min(args.n, 20_000)
    rows = []
    for name, (rep, route) in impls.items():
        n = np_n if name == "numpy" else args.n
        t_rep = _best(lambda: replay(rep, n), args.repeat) / n
        t_route = _best(lambda: route(hashes, 7), args.repeat) / args.n
        rows.append({"path": name, "cms_replay_ns_per_record": t_rep * 1e9, "route_ns_per_record": t_route * 1e9})

    print(f"{'path':<8}{'cms replay ns/rec':>20}{'route ns/rec':>16}")
    for r in rows:
        print(f"{r['path']:<8}{r['cms_replay_ns_per_record']:>20.1f}{r['route_ns_per_record']:>16.2f}")
    if len(rows) == 2:
        print(f"speedup (numba over numpy): replay {rows[0]['cms_replay_ns_per_record'] / rows[1]['cms_replay_ns_per_record']:.1f}x, "
              f"route {rows[0]['route_ns_per_record'] / rows[1]['route_ns_per_record']:.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
