"""Run experiments: warmup, measurement, reports, throughput search, scenarios, sweeps."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from ..backend import LatencyDist, NS_PER_MS
from ..job import Job, build_job
from ..stateful import ASYNC_IO, KEYED_PREFETCHING, StateConfig
from .config import ExperimentConfig
from .metrics import MetricsReport, backlog_trend, latency_percentiles
from .topologies import build_topology
from .workload import generate

log = logging.getLogger(__name__)


class Backpressure(RuntimeError):
    """The input rate is not sustainable: queues grew past the configured bound."""

    def __init__(self, message: str, report: MetricsReport | None = None):
        super().__init__(message)
        self.report = report


class WarmupIncomplete(RuntimeError):
    pass


@dataclass
class RunResult:
    report: MetricsReport
    latencies: list
    job: Job
    backlog: list[tuple[int, int]] = field(default_factory=list)


def _state_config(cfg: ExperimentConfig, mode: str, policy: str, topo) -> StateConfig:
    par = cfg.topology.parallelism.get(topo.stateful, cfg.topology.default_parallelism)
    return StateConfig(
        mode=mode,
        cache_capacity=cfg.cache.entries(cfg.workload.key_space, par),
        eviction_buffer_slots=cfg.cache.eviction_buffer_slots,
        io_pool_size=cfg.cache.io_pool_size,
        async_policy=policy,
        max_parked=cfg.cache.max_parked,
        backend=cfg.backend,
        preload=topo.preload,
        prefetch=cfg.prefetching,
    )


def run_experiment(cfg: ExperimentConfig, raise_on_backpressure: bool = True) -> MetricsReport:
    """Run one configuration; async-io with policy ``best`` runs LRU and Clock and keeps the lower p999."""
    return run_detailed(cfg, raise_on_backpressure).report


def run_detailed(cfg: ExperimentConfig, raise_on_backpressure: bool = True) -> RunResult:
    if cfg.run.mode == ASYNC_IO and cfg.cache.async_policy == "best":
        results = [_run_once(cfg, ASYNC_IO, p, raise_on_backpressure) for p in ("lru", "clock")]
        best = min(results, key=lambda r: (not r.report.sustainable, r.report.p999_ms))
        best.report.diagnostics.append(
            "async-io cache policy chosen by p999: " + ", ".join(f"{r.report.cache_policy}={r.report.p999_ms:.3f}ms" for r in results)
        )
        return best
    policy = cfg.cache.async_policy if cfg.cache.async_policy != "best" else "lru"
    return _run_once(cfg, cfg.run.mode, policy, raise_on_backpressure)


def _run_once(cfg: ExperimentConfig, mode: str, policy: str, raise_on_backpressure: bool) -> RunResult:
    wall0 = time.perf_counter()
    run = cfg.run
    topo = build_topology(cfg.topology, cfg.workload.key_space)
    state = _state_config(cfg, mode, policy, topo)
    job = build_job(topo.specs, topo.edges, state=state, seed=run.seed, clock=run.clock)
    engine, env = job.engine, job.env
    for i, src in enumerate(topo.sources):
        engine.attach_source(src, generate(cfg.workload, stream=i))
    workers = job.stateful_workers()
    capacity = sum(w.cache.capacity for w in workers)
    target = capacity * run.warmup_factor
    tick = int(run.monitor_interval_ms * NS_PER_MS)
    st = {"warm": None, "end": None, "abort": None, "base": None, "warm_ok": True}
    samples: list[tuple[int, int]] = []
    timeline: list[dict] = []

    def counters():
        return {
            "hits": sum(w.hits for w in workers),
            "cold": sum(w.cold_misses for w in workers),
            "late": sum(w.late_hint_misses for w in workers),
            "io_stall": sum(w.io_stall_ns for w in workers),
            "waits": sum(w.buffer_full_waits for w in workers),
            "reads": sum(w.backend.reads for w in workers),
            "writes": sum(w.backend.writes for w in workers),
            "unused": sum(w.manager.stats.prefetched_unused for w in workers if w.manager),
            "prefetched": sum(w.manager.stats.prefetched_total for w in workers if w.manager),
            "used": sum(w.manager.stats.prefetched_used for w in workers if w.manager),
            "hints_rx": sum(w.manager.hints_received for w in workers if w.manager),
            "hints_wm": sum(w.manager.hints_dropped_watermark for w in workers if w.manager),
            "overflow": sum(w.manager.buffer.overflow_evictions for w in workers if w.manager),
            "incomplete": sum(w.manager.rounds.incomplete for w in workers if w.manager),
            "hints_tx": engine.metrics.total("hints_sent"),
        }

    def monitor():
        while True:
            yield env.timeout(tick)
            now = env.now
            backlog = engine.backlog()
            if st["warm"] is None:
                seen = sum(len(w.seen_keys) for w in workers)
                if now >= run.min_warmup_ms * NS_PER_MS and seen > target:
                    st["warm"] = now
                elif now >= run.max_warmup_ms * NS_PER_MS:
                    st["warm"] = now
                    st["warm_ok"] = False
                if st["warm"] is not None:
                    st["base"] = counters()
                    st["end"] = now + int(run.measure_ms * NS_PER_MS)
            elif now <= st["end"]:
                samples.append((now, backlog))
            if backlog > run.queue_bound:
                st["abort"] = f"backpressure: backlog {backlog} exceeds bound {run.queue_bound} at t={now / 1e9:.2f}s"
                engine.stop_sources()
                return
            if st["end"] is not None and now >= st["end"]:
                engine.stop_sources()
                return

    def perturb(p):
        yield env.timeout(int(p.at_ms * NS_PER_MS))
        if p.action == "rewrite_on":
            topo.rewrite.on = True
        elif p.action == "rewrite_off":
            topo.rewrite.on = False
        else:
            for w in workers:
                w.backend.profile.read_latency = LatencyDist.parse(p.value)
        log.info("t=%.2fs perturbation %s %s", env.now / 1e9, p.action, p.value)
        timeline.append({"time_ms": env.now / NS_PER_MS, "event": p.action, "value": p.value})

    def sampler(interval: int):
        prev = counters()
        while True:
            yield env.timeout(interval)
            cur = counters()
            d = {k: cur[k] - prev[k] for k in cur}
            prev = cur
            accesses = d["hits"] + d["cold"] + d["late"]
            row = {
                "time_ms": env.now / NS_PER_MS,
                "active": {s: cl.active for s, cl in job.controller.lists.items()} if job.controller else {},
                "hits": d["hits"], "cold_misses": d["cold"], "late_hint_misses": d["late"],
                "miss_ratio": (d["cold"] + d["late"]) / accesses if accesses else 0.0,
                "prefetched": d["prefetched"], "prefetch_misses": d["unused"],
                "prefetch_miss_ratio": d["unused"] / d["prefetched"] if d["prefetched"] else 0.0,
            }
            timeline.append(row)

    if run.perturbations:
        if any(p.action.startswith("rewrite") for p in run.perturbations) and topo.rewrite is None:
            raise ValueError(f"topology {topo.name} has no key-rewriting operator")
        # private profile copies so a latency change stays local to this run
        for w in workers:
            w.backend.profile = _copy_profile(w.backend.profile)
        for p in run.perturbations:
            env.process(perturb(p))
    if run.timeline_interval_ms:
        env.process(sampler(int(run.timeline_interval_ms * NS_PER_MS)))
    env.process(monitor())
    job.start()
    limit = (run.max_warmup_ms + run.measure_ms + run.drain_limit_ms) * NS_PER_MS
    engine.run_until_drained(limit_ns=int(limit))
    if job.controller is not None:
        job.controller.stop()

    warm = st["warm"] if st["warm"] is not None else env.now
    end = st["end"] if st["end"] is not None else env.now
    base = st["base"] or {k: 0 for k in counters()}
    cur = counters()
    d = {k: cur[k] - base[k] for k in cur}
    lats = [r for r in engine.metrics.latencies if warm <= r.ingest_ns < end]
    pct = latency_percentiles([r.latency_ns for r in lats])
    slope = backlog_trend([t for t, _ in samples], [b for _, b in samples])
    rate = cfg.workload.rate
    allowed = run.growth_tolerance * (rate or 0.0)
    sustainable = st["abort"] is None and slope <= max(allowed, 1.0)
    accesses = d["hits"] + d["cold"] + d["late"]
    slack = {}
    p99_fetch = None
    diagnostics = []
    if job.controller is not None:
        for w in workers:
            for c in w.manager.stats.g:
                v = w.manager.stats.p99_g_ms(c)
                slack[c] = v if c not in slack else min(slack[c], v)
            fv = w.manager.stats.p99_f_ms()
            if fv is not None:
                p99_fetch = fv if p99_fetch is None else max(p99_fetch, fv)
        if sum(w.manager.no_candidate_diagnostics for w in workers):
            diagnostics.append("some evaluation windows found no candidate covering p99(F)+gamma; earliest candidate kept")
    if not st["warm_ok"]:
        diagnostics.append(f"warmup cut at max_warmup_ms before {target:.0f} distinct keys were seen")
    if st["abort"]:
        diagnostics.append(st["abort"])
    n = len(lats)
    report = MetricsReport(
        mode=mode, seed=run.seed, samples=n,
        p50_ms=pct["p50"], p95_ms=pct["p95"], p99_ms=pct["p99"], p999_ms=pct["p999"],
        p999_low_confidence=n < run.min_p999_samples,
        mean_ms=(sum(r.latency_ns for r in lats) / n / NS_PER_MS) if n else float("nan"),
        max_ms=(max(r.latency_ns for r in lats) / NS_PER_MS) if n else float("nan"),
        input_rate=rate,
        achieved_tps=n / ((end - warm) / 1e9) if end > warm else 0.0,
        sustainable=sustainable, backlog_slope=slope,
        max_backlog=max((b for _, b in samples), default=0),
        hits=d["hits"], cold_misses=d["cold"], late_hint_misses=d["late"],
        prefetch_misses=d["unused"], prefetched_total=d["prefetched"], prefetched_used=d["used"],
        hit_ratio=d["hits"] / accesses if accesses else 0.0,
        hints_sent=d["hints_tx"], hints_received=d["hints_rx"], hints_dropped_watermark=d["hints_wm"],
        hint_extract_failures=sum(e.failures for exts in (job.controller._extractors.values() if job.controller else []) for e in exts),
        hints_buffer_overflow=d["overflow"], incomplete_marker_rounds=d["incomplete"],
        io_stall_ms=d["io_stall"] / NS_PER_MS, buffer_full_waits=d["waits"],
        backend_reads=d["reads"], backend_writes=d["writes"],
        p99_fetch_ms=p99_fetch, per_candidate_p99_slack_ms=slack,
        active_lookahead_timeline=[
            {"time_ms": e.time_ns / NS_PER_MS, "stateful_op": e.stateful_op, "kind": e.kind, "active": e.active, "detail": e.detail}
            for e in (job.controller.timeline if job.controller else [])
        ],
        timeline=timeline,
        cache_policy=state.policy,
        warmup_ms=warm / NS_PER_MS, measure_ms=(end - warm) / NS_PER_MS, warmup_complete=st["warm_ok"],
        virtual_seconds=env.now / 1e9, wall_seconds=time.perf_counter() - wall0,
        diagnostics=diagnostics,
    )
    if st["abort"] and raise_on_backpressure:
        raise Backpressure(st["abort"], report)
    return RunResult(report, lats, job, samples)


def _copy_profile(profile):
    from ..backend import BackendProfile

    return BackendProfile.from_dict(profile.to_dict())


# ---------------------------------------------------------------------------
# throughput search
# ---------------------------------------------------------------------------


@dataclass
class ThroughputResult:
    rate: float
    probes: list[tuple[float, bool]]


def probe_sustainable(cfg: ExperimentConfig, rate: float) -> bool:
    c = cfg.with_value("workload.rate", float(rate))
    try:
        rep = run_experiment(c, raise_on_backpressure=True)
    except Backpressure:
        return False
    return rep.sustainable


def sustainable_throughput_search(
    cfg: ExperimentConfig,
    lo: float = 1_000.0,
    hi: float = 1_000_000.0,
    resolution: float = 0.05,
    max_probes: int = 40,
    probe=probe_sustainable,
) -> ThroughputResult:
    """Highest sustainable input rate within ``resolution`` (relative), by geometric bisection."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    probes: list[tuple[float, bool]] = []

    def check(r: float) -> bool:
        ok = probe(cfg, r)
        probes.append((r, ok))
        log.info("probe %.1f tps -> %s", r, "sustainable" if ok else "backpressure")
        return ok

    if not check(lo):
        raise Backpressure(f"even the minimum rate {lo:.0f} tps is not sustainable")
    if check(hi):
        return ThroughputResult(hi, probes)
    good, bad = lo, hi
    while bad / good > 1.0 + resolution and len(probes) < max_probes:
        mid = (good * bad) ** 0.5
        if check(mid):
            good = mid
        else:
            bad = mid
    return ThroughputResult(good, probes)


# ---------------------------------------------------------------------------
# scenarios and sweeps
# ---------------------------------------------------------------------------


def scenario_dynamic_lookahead(cfg: ExperimentConfig) -> MetricsReport:
    """Scripted perturbations (key rewrite, backend latency drop) with a per-window timeline.

    Defaults, if the config lists none: rewrite on at 40% of the measured
    run and a read latency of 2 ms at 60%.
    """
    c = cfg.copy()
    if c.run.mode != KEYED_PREFETCHING:
        raise ValueError("the dynamic-lookahead scenario needs mode keyed-prefetching")
    if not c.run.timeline_interval_ms:
        c.run.timeline_interval_ms = c.prefetching.eval_window_ms
    if not c.run.perturbations:
        from .config import Perturbation

        total = c.run.min_warmup_ms + c.run.measure_ms
        c.run.perturbations = [
            Perturbation(0.4 * total, "rewrite_on"),
            Perturbation(0.6 * total, "read_latency", 2.0),
        ]
        c.run.warmup_factor = 0.0
    return run_experiment(c, raise_on_backpressure=False)


def sweep(cfg: ExperimentConfig, param: str, values: list, modes: list[str] | None = None) -> list[dict]:
    rows = []
    for v in values:
        for m in modes or [cfg.run.mode]:
            c = cfg.with_value(param, v).with_value("run.mode", m)
            try:
                rep = run_experiment(c, raise_on_backpressure=False)
                rows.append({"param": param, "value": v, "mode": m, **_row(rep)})
            except Backpressure as exc:  # pragma: no cover - raise_on_backpressure is False
                rows.append({"param": param, "value": v, "mode": m, "error": str(exc)})
    return rows


def _row(rep: MetricsReport) -> dict:
    keys = ("p50_ms", "p95_ms", "p99_ms", "p999_ms", "p999_low_confidence", "samples", "hit_ratio",
            "cold_misses", "late_hint_misses", "prefetch_misses", "hints_sent", "sustainable", "cache_policy")
    return {k: getattr(rep, k) for k in keys}
