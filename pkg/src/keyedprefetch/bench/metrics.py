"""Latency percentiles, backlog trend and the run report."""

from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..backend import NS_PER_MS
from ..manager import percentile

PERCENTILES = {"p50": 50.0, "p95": 95.0, "p99": 99.0, "p999": 99.9}


def min_samples_for(q: float, tail_events: int = 10) -> int:
    """Samples needed so the ``q`` percentile has ``tail_events`` observations above it.

    Above the 99.9th percentile the expected count is n/1000; with fewer
    than ~10 tail points the binomial spread of the order statistic is
    wider than the tail itself, so we ask for n >= 10 / (1 - q/100).
    """
    return math.ceil(tail_events / (1 - Fraction(str(q)) / 100))


def latency_percentiles(latencies_ns) -> dict[str, float]:
    arr = np.asarray(latencies_ns, dtype=float) / NS_PER_MS
    if arr.size == 0:
        return {k: float("nan") for k in PERCENTILES}
    return {k: percentile(arr, q) for k, q in PERCENTILES.items()}


def backlog_trend(times_ns, backlog) -> float:
    """Least-squares slope of the backlog in records per second."""
    t = np.asarray(times_ns, dtype=float) / 1e9
    b = np.asarray(backlog, dtype=float)
    if t.size < 3 or np.ptp(t) == 0:
        return 0.0
    return float(np.polyfit(t, b, 1)[0])


@dataclass
class MetricsReport:
    mode: str
    seed: int
    samples: int
    p50_ms: float
    p95_ms: float
    p99_ms: float
    p999_ms: float
    p999_low_confidence: bool
    mean_ms: float
    max_ms: float
    input_rate: float | None
    achieved_tps: float
    sustainable: bool
    backlog_slope: float
    max_backlog: int
    hits: int
    cold_misses: int
    late_hint_misses: int
    prefetch_misses: int
    prefetched_total: int
    prefetched_used: int
    hit_ratio: float
    hints_sent: int
    hints_received: int
    hints_dropped_watermark: int
    hint_extract_failures: int
    hints_buffer_overflow: int
    incomplete_marker_rounds: int
    io_stall_ms: float
    buffer_full_waits: int
    backend_reads: int
    backend_writes: int
    p99_fetch_ms: float | None
    per_candidate_p99_slack_ms: dict[str, float] = field(default_factory=dict)
    active_lookahead_timeline: list[dict] = field(default_factory=list)
    timeline: list[dict] = field(default_factory=list)
    cache_policy: str = ""
    warmup_ms: float = 0.0
    measure_ms: float = 0.0
    warmup_complete: bool = True
    virtual_seconds: float = 0.0
    wall_seconds: float = 0.0
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def write(self, out_dir: str | Path, latencies_ns=None, stem: str = "report") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        if latencies_ns is not None:
            write_latency_csv(out / f"{stem}_latencies.csv", latencies_ns)
            write_percentile_curve(out / f"{stem}_percentiles.dat", latencies_ns)
        return out / f"{stem}.json"


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"not JSON serialisable: {type(x)}")


def write_latency_csv(path: str | Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["output_ns", "ingest_ns", "latency_ns", "sink"])
        for r in records:
            w.writerow([r.output_ns, r.ingest_ns, r.latency_ns, r.sink])


def write_percentile_curve(path: str | Path, records) -> None:
    """Gnuplot-style two-column file: percentile, latency in ms."""
    arr = np.asarray([r.latency_ns for r in records], dtype=float) / NS_PER_MS
    qs = [50, 75, 90, 95, 99, 99.5, 99.9, 99.95, 99.99]
    with open(path, "w") as fh:
        fh.write("# percentile latency_ms\n")
        if arr.size:
            for q in qs:
                fh.write(f"{q} {percentile(arr, q):.6f}\n")
