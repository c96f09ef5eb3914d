"""Small end-to-end runs shared by several test modules."""

from __future__ import annotations

from keyedprefetch.backend import BackendProfile, LatencyDist
from keyedprefetch.bench.topologies import TopologyConfig, build_topology
from keyedprefetch.bench.workload import WorkloadSpec, generate
from keyedprefetch.job import build_job
from keyedprefetch.manager import PrefetchConfig
from keyedprefetch.reference import ReferenceExecutor, output_multiset
from keyedprefetch.stateful import StateConfig


def make_job(
    topology: str = "enrich",
    mode: str = "keyed-prefetching",
    *,
    seed: int = 0,
    n: int = 300,
    key_space: int = 40,
    distribution: str = "zipf",
    rate: float = 2000.0,
    parallelism: int = 2,
    capacity: int = 5,
    read_ms: float = 1.0,
    edge_delay=None,
    collect: bool = True,
    trace: bool = False,
    prefetch: PrefetchConfig | None = None,
    **workload,
):
    delay = edge_delay if edge_delay is not None else {"kind": "uniform", "lo": 0.0, "hi": 2.0}
    topo = build_topology(TopologyConfig(topology, default_parallelism=parallelism, default_edge_delay_ms=delay), key_space)
    spec = WorkloadSpec(key_space=key_space, distribution=distribution, rate=rate, num_tuples=n, seed=seed, payload_size=8, **workload)
    state = StateConfig(
        mode=mode, cache_capacity=capacity,
        backend=BackendProfile(read_latency=LatencyDist.fixed(read_ms), write_latency=LatencyDist.fixed(read_ms)),
        preload=topo.preload,
        prefetch=prefetch or PrefetchConfig(min_samples=3),
    )
    job = build_job(topo.specs, topo.edges, state=state, seed=seed, collect_outputs=collect, trace=trace)
    return job, topo, spec


def small_run(topology: str = "enrich", mode: str = "keyed-prefetching", **kw):
    """Build with ``make_job``, feed the generated workload and run until drained."""
    job, topo, spec = make_job(topology, mode, **kw)
    for i, src in enumerate(topo.sources):
        job.engine.attach_source(src, generate(spec, stream=i))
    job.run_until_drained(limit_ns=10**12)
    return job, topo, spec


def reference_outputs(topology: str, spec: WorkloadSpec, key_space: int, parallelism: int = 2):
    return output_multiset(reference_run(topology, spec, key_space, parallelism).outputs)


def engine_outputs(job):
    from collections import Counter

    return Counter((k, v) for _, k, v in job.metrics.outputs)


def reference_run(topology: str, spec: WorkloadSpec, key_space: int, parallelism: int = 2) -> ReferenceExecutor:
    topo = build_topology(TopologyConfig(topology, default_parallelism=parallelism), key_space)
    from keyedprefetch.dataflow import build_graph

    ref = ReferenceExecutor(build_graph(topo.specs, topo.edges), topo.preload)
    ref.run({src: generate(spec, stream=i) for i, src in enumerate(topo.sources)})
    return ref


def state_matches_reference(job, ref: ReferenceExecutor) -> list:
    """Flush every cache; return the reference state entries the backends disagree with.

    A key never written keeps its preloaded row or the operator's initial value.
    """
    from keyedprefetch.hashing import route

    job.flush()
    bad = []
    for (op, sk), want in ref.state.items():
        spec = job.engine.graph.specs[op]
        w = job.engine.workers[(op, route(sk.partition_key, spec.parallelism))]
        got = w.backend.peek(sk)
        if got is None:
            got = spec.initial_state(sk) if callable(spec.initial_state) else spec.initial_state
        if got != want:
            bad.append((op, sk))
    return bad


def random_case(rng) -> dict:
    """Keyword arguments for ``small_run`` describing one small random workload."""
    late = rng.random() < 0.3
    return dict(
        topology=str(rng.choice(["enrich", "topn", "two-stream-join"])),
        seed=int(rng.integers(1 << 30)),
        n=int(rng.integers(20, 300)),
        key_space=int(rng.integers(2, 60)),
        distribution=str(rng.choice(["zipf", "uniform", "hot-set"])),
        rate=float(rng.choice([200.0, 2000.0, 20000.0])),
        parallelism=int(rng.integers(1, 4)),
        capacity=int(rng.integers(1, 8)),
        read_ms=float(rng.uniform(0.1, 4.0)),
        out_of_order_fraction=0.1 if late else 0.0,
        max_lateness_ms=50.0 if late else 0.0,
    )


def check_against_reference(case: dict, mode: str) -> tuple[bool, str]:
    case = dict(case)
    topology = case.pop("topology")
    job, _, spec = small_run(topology, mode, **case)
    ref = reference_run(topology, spec, case.get("key_space", 40), case.get("parallelism", 2))
    want, got = output_multiset(ref.outputs), engine_outputs(job)
    if got != want:
        return False, f"outputs differ: {sum(got.values())} vs {sum(want.values())} records"
    bad = state_matches_reference(job, ref)
    if bad:
        return False, f"{len(bad)} state entries differ"
    return True, ""
