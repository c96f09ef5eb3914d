from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import pytest

from keyedprefetch.bench.config import ExperimentConfig
from keyedprefetch.bench.harness import Backpressure, run_detailed, run_experiment, sustainable_throughput_search
from keyedprefetch.bench.metrics import latency_percentiles, min_samples_for
from keyedprefetch.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
QUICK = CONFIGS / "quick.json"


# -- configuration --------------------------------------------------------------


@pytest.mark.parametrize("name", ["quick", "tail_latency", "throughput", "dynamic_lookahead"])
def test_shipped_configs_parse(name):
    cfg = ExperimentConfig.load(CONFIGS / f"{name}.json")
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [
    {"extra": {}},
    {"workload": {"keyspace": 10}},
    {"prefetching": {"filter": {"treshold": 3}}},
    {"run": {"mode": "fifo"}},
    {"cache": {"async_policy": "random"}},
])
def test_config_rejects_bad_input(doc):
    with pytest.raises((ValueError, TypeError)):
        ExperimentConfig.from_dict(doc)


def test_with_value_copies_and_validates():
    cfg = ExperimentConfig.load(QUICK)
    c2 = cfg.with_value("prefetching.filter.threshold", 7)
    assert c2.prefetching.filter.threshold == 7 and cfg.prefetching.filter.threshold == 20
    assert cfg.with_value("workload.rate", 5.0).workload.rate == 5.0
    with pytest.raises(KeyError):
        cfg.with_value("workload.nope", 1)
    with pytest.raises(ValueError):
        cfg.with_value("workload.p_hot", 2.0)


def test_two_pool_sizes_are_independent():
    cfg = ExperimentConfig.from_dict({"cache": {"io_pool_size": 3}, "prefetching": {"io_pool_size": 9}})
    assert (cfg.cache.io_pool_size, cfg.prefetching.io_pool_size) == (3, 9)


# -- metrics ---------------------------------------------------------------------


def test_percentiles_inverted_cdf():
    pct = latency_percentiles([i * 1_000_000 for i in range(1, 1001)])
    assert pct == {"p50": 500.0, "p95": 950.0, "p99": 990.0, "p999": 999.0}


def test_p999_sample_requirement():
    assert min_samples_for(99.9) == 10_000


# -- runs ------------------------------------------------------------------------


def test_quick_run_report(tmp_path):
    res = run_detailed(ExperimentConfig.load(QUICK))
    r = res.report
    assert r.samples == len(res.latencies) > 0
    assert r.p50_ms <= r.p95_ms <= r.p99_ms <= r.p999_ms <= r.max_ms
    assert r.sustainable and r.warmup_complete
    assert r.p999_low_confidence == (r.samples < 10_000)
    assert 0.0 <= r.hit_ratio <= 1.0
    assert r.active_lookahead_timeline and r.active_lookahead_timeline[0]["kind"] == "activate"
    path = r.write(tmp_path, res.latencies)
    doc = json.loads(path.read_text())
    assert doc["mode"] == "keyed-prefetching" and doc["p999_ms"] == r.p999_ms
    with open(tmp_path / "report_latencies.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["output_ns", "ingest_ns", "latency_ns", "sink"] and len(rows) == r.samples + 1
    assert all(int(a) - int(b) == int(c) for a, b, c, _ in rows[1:])
    assert (tmp_path / "report_percentiles.dat").read_text().startswith("# percentile")


def test_low_confidence_flag_follows_threshold():
    cfg = ExperimentConfig.load(QUICK).with_value("run.min_p999_samples", 100)
    assert not run_experiment(cfg).p999_low_confidence


@pytest.mark.parametrize("mode", ["cache-lru", "cache-clock", "cache-tac", "async-io", "keyed-prefetching"])
def test_runs_are_deterministic(mode):
    cfg = ExperimentConfig.load(QUICK).with_value("run.mode", mode).with_value("run.measure_ms", 1000.0)
    a, b = run_experiment(cfg).to_dict(), run_experiment(cfg).to_dict()
    a.pop("wall_seconds"), b.pop("wall_seconds")
    assert a == b


def test_no_perturbation_keeps_lookahead():
    cfg = ExperimentConfig.load(CONFIGS / "dynamic_lookahead.json").with_value("run.perturbations", [])
    rep = run_experiment(cfg, raise_on_backpressure=False)
    kinds = [e["kind"] for e in rep.active_lookahead_timeline]
    assert kinds == ["activate"]


def test_overload_raises_backpressure():
    cfg = ExperimentConfig.load(QUICK).with_value("workload.rate", 200_000.0).with_value("run.queue_bound", 500)
    with pytest.raises(Backpressure):
        run_experiment(cfg)


# -- throughput search -----------------------------------------------------------


def _threshold_probe(limit):
    return lambda cfg, rate: rate <= limit


@pytest.mark.parametrize("limit", [1_000.0, 1_234.5, 37_000.0, 512_345.0, 999_999.0])
def test_throughput_search_brackets_within_resolution(limit):
    res = sustainable_throughput_search(None, 1_000, 1_000_000, 0.05, probe=_threshold_probe(limit))
    assert res.rate <= limit < res.rate * 1.05
    assert len(res.probes) <= 15
    # bisection invariant: every sustainable probe is below every unsustainable one
    ok = [r for r, s in res.probes if s]
    bad = [r for r, s in res.probes if not s]
    assert not bad or max(ok) < min(bad)


def test_throughput_search_top_of_range():
    res = sustainable_throughput_search(None, 1_000, 1_000_000, probe=_threshold_probe(math.inf))
    assert res.rate == 1_000_000 and len(res.probes) == 2


def test_throughput_search_floor_unsustainable():
    with pytest.raises(Backpressure):
        sustainable_throughput_search(None, 1_000, 1_000_000, probe=_threshold_probe(10))
    with pytest.raises(ValueError):
        sustainable_throughput_search(None, 10, 5, probe=_threshold_probe(10))


# -- command line ------------------------------------------------------------------


def test_cli_run(tmp_path, capsys):
    assert main(["run", "--config", str(QUICK), "--out", str(tmp_path), "--set", "run.measure_ms=1000"]) == 0
    assert "p999=" in capsys.readouterr().out
    assert (tmp_path / "report.json").exists() and (tmp_path / "report_latencies.csv").exists()


def test_cli_backpressure_exit_code(tmp_path):
    code = main(["run", "--config", str(QUICK), "--out", str(tmp_path),
                 "--set", "workload.rate=200000", "--set", "run.queue_bound=500"])
    assert code == 2


def test_cli_sweep(tmp_path):
    code = main(["sweep", "--config", str(QUICK), "--out", str(tmp_path), "--set", "run.measure_ms=500",
                 "--param", "workload.alpha", "--values", "0.8", "1.2", "--modes", "cache-lru", "keyed-prefetching"])
    rows = json.loads((tmp_path / "sweep.json").read_text())
    assert code == 0 and len(rows) == 4 and {r["mode"] for r in rows} == {"cache-lru", "keyed-prefetching"}


def test_cli_rejects_unknown_mode():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mode", "magic"])
    assert exc.value.code == 2
