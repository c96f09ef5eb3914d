from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keyedprefetch.backend import NS_PER_MS, LatencyDist
from keyedprefetch.dataflow import (
    BROADCAST, FILTER, FORWARD, MAP, SINK, SOURCE, STATEFUL, Edge, Engine, GraphError, Marker, OperatorSpec,
    Tuple, build_graph, decompose, end_to_end_latency,
)
from keyedprefetch.hashing import route
from keyedprefetch.job import build_job
from keyedprefetch.stateful import StateConfig
from helpers import make_job

# measured median handoff of a zero-work 3-stage pipeline in wallclock mode
# was ~25 us (max ~140 us); the bound leaves room for slow CI machines
HANDOFF_EPSILON_NS = 1 * NS_PER_MS


def chain(*kinds, par=1, fns=None, delays=None, service=None):
    fns = fns or {}
    ids = [f"op{i}" for i in range(len(kinds))]
    specs = [OperatorSpec(i, k, par if k not in (SOURCE, SINK) else 1, fns.get(i), service=(service or {}).get(i, 0.0))
             for i, k in zip(ids, kinds)]
    edges = [Edge(a, b, delay=(delays or {}).get(a, 0.0)) for a, b in zip(ids, ids[1:])]
    return build_graph(specs, edges)


def test_linear_chain_layout():
    g = chain(SOURCE, MAP, SINK)
    assert len(g.workers) == 3 and len(g.channels) == 2
    assert g.order == ["op0", "op1", "op2"]


def test_hash_partitions_are_disjoint():
    specs = [OperatorSpec("src", SOURCE), OperatorSpec("udf", MAP, fn=lambda t: t),
             OperatorSpec("st", STATEFUL, 3, fn=lambda t, s: ([t], {})), OperatorSpec("snk", SINK)]
    g = build_graph(specs, [("src", "udf"), ("udf", "st"), ("st", "snk")])
    assert sum(1 for c in g.channels if c.dst[0] == "st") == 3
    job = build_job(g, state=StateConfig(mode="cache-lru"))
    seen = defaultdict(set)
    for j in range(3):
        w = job.engine.workers[("st", j)]
        orig = w.deliver
        w.deliver = lambda item, ch=None, j=j, orig=orig: (seen[j].add(getattr(item, "key", None)), orig(item, ch))
    job.engine.attach_source("src", ((i, Tuple(i, b"k%d" % (i % 50), b"")) for i in range(500)))
    job.run_until_drained()
    keys = [s - {None} for s in seen.values()]
    assert sum(len(s) for s in keys) == 50
    assert all(not (a & b) for i, a in enumerate(keys) for b in keys[i + 1:])
    for j, s in seen.items():
        assert all(route(k, 3) == j for k in s if k is not None)


def test_graph_errors():
    with pytest.raises(GraphError, match="cycle detected"):
        build_graph([OperatorSpec("s", SOURCE), OperatorSpec("a", MAP), OperatorSpec("b", MAP)],
                    [("s", "a"), ("a", "b"), ("b", "a")])
    with pytest.raises(GraphError, match="dangling"):
        build_graph([OperatorSpec("s", SOURCE)], [("s", "zz")])
    with pytest.raises(GraphError, match="non-hash"):
        build_graph([OperatorSpec("s", SOURCE), OperatorSpec("st", STATEFUL)], [Edge("s", "st", BROADCAST)])
    with pytest.raises(GraphError, match="equal parallelism"):
        build_graph([OperatorSpec("s", SOURCE), OperatorSpec("m", MAP, 2)], [Edge("s", "m", FORWARD)])
    with pytest.raises(GraphError, match="not connected"):
        build_graph([OperatorSpec("s", SOURCE), OperatorSpec("t", SOURCE)], [])
    with pytest.raises(GraphError):
        OperatorSpec("x", "window")


def test_end_to_end_latency_example():
    # q=[1,2] p=[3,4] c=[5] (ms) through two stages
    ms = NS_PER_MS
    trace = [("a", 0, 1 * ms, 4 * ms), ("b", 9 * ms, 11 * ms, 15 * ms)]
    q, p, c = decompose(trace, 15 * ms)
    assert (q, p, c) == ([ms, 2 * ms], [3 * ms, 4 * ms], [5 * ms])
    assert sum(q) + sum(p) + sum(c) == end_to_end_latency(Tuple(0, b"k", b"", ingest_ns=0), 15 * ms) == 15 * ms


def test_latency_needs_ingest():
    with pytest.raises(ValueError):
        end_to_end_latency(Tuple(0, b"k", b"", ingest_ns=None), 5)


def test_filtered_tuple_emits_no_latency_record():
    g = chain(SOURCE, FILTER, SINK, fns={"op1": lambda t: t.event_time % 2 == 0})
    e = Engine(g)
    e.attach_source("op0", ((i, Tuple(i, b"k", b"")) for i in range(10)))
    e.run_until_drained()
    assert len(e.metrics.latencies) == 5


def test_zero_work_virtual_latency_is_zero():
    g = chain(SOURCE, MAP, SINK, fns={"op1": lambda t: t})
    e = Engine(g)
    e.attach_source("op0", ((i * 1000, Tuple(i, b"k", b"")) for i in range(100)))
    e.run_until_drained()
    assert {r.latency_ns for r in e.metrics.latencies} == {0}


def test_zero_work_wallclock_handoff_is_bounded():
    g = chain(SOURCE, MAP, SINK, fns={"op1": lambda t: t})
    e = Engine(g, clock="wallclock")
    e.attach_source("op0", ((i * NS_PER_MS, Tuple(i, b"k", b"")) for i in range(200)))
    e.run_until_drained()
    assert float(np.median([r.latency_ns for r in e.metrics.latencies])) < HANDOFF_EPSILON_NS


@settings(max_examples=40)
@given(st.lists(st.integers(0, 5), min_size=3, max_size=3), st.lists(st.integers(0, 5), min_size=2, max_size=2),
       st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_latency_decomposition_is_exact(service, delays, gaps):
    g = chain(SOURCE, MAP, MAP, SINK, fns={"op1": lambda t: t, "op2": lambda t: t},
              service={"op1": service[0], "op2": service[1], "op3": service[2]},
              delays={"op1": delays[0], "op2": delays[1]})
    e = Engine(g, trace=True)
    arrivals = np.cumsum([x * NS_PER_MS for x in gaps]).tolist()
    e.attach_source("op0", ((int(a), Tuple(i, b"k", b"")) for i, a in enumerate(arrivals)))
    e.run_until_drained()
    assert len(e.metrics.traces) == len(gaps)
    for trace, out_ns, ingest in e.metrics.traces:
        q, p, c = decompose(trace, out_ns)
        assert trace[0][1] == ingest and trace[-1][3] == out_ns
        assert sum(q) + sum(p) + sum(c) == out_ns - ingest


def _record_markers(worker, log):
    orig = worker.deliver

    def deliver(item, ch=None):
        if isinstance(item, Marker):
            log.append((ch.spec.src if ch is not None else None, item))
        orig(item, ch)

    worker.deliver = deliver


def test_marker_reaches_sink_once_per_input_channel():
    specs = [OperatorSpec("src", SOURCE, 2), OperatorSpec("m", MAP, 3), OperatorSpec("snk", SINK, 1)]
    e = Engine(build_graph(specs, [("src", "m"), ("m", "snk")]))
    log = []
    _record_markers(e.workers[("snk", 0)], log)
    e.inject_marker(7)
    e.run()
    assert sorted(src for src, _ in log) == [("m", 0), ("m", 1), ("m", 2)]
    assert all(m.round == 7 and m.origin is None for _, m in log)


def test_candidates_duplicate_markers_onto_hint_channel():
    job, _, _ = make_job("enrich", edge_delay=0.0, parallelism=1)
    w = job.engine.workers[("enrich", 0)]
    hint_copies, data = [], []
    orig_hint = w.deliver_hint
    w.deliver_hint = lambda item, ch=None: (hint_copies.append(item) if isinstance(item, Marker) else None, orig_hint(item, ch))
    _record_markers(w, data)
    job.engine.inject_marker(99)
    job.engine.run(until=10 * NS_PER_MS)
    assert sorted(m.origin for m in hint_copies) == ["parse", "udf1", "udf2"]
    assert [m.origin for _, m in data] == [None]


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.floats(0.0, 5.0))
def test_channel_fifo(seed, hi):
    g = build_graph([OperatorSpec("s", SOURCE), OperatorSpec("m", MAP, fn=lambda t: t), OperatorSpec("k", SINK)],
                    [Edge("s", "m", delay=LatencyDist.uniform(0, hi)), Edge("m", "k", delay=LatencyDist.uniform(0, hi))])
    e = Engine(g, seed=seed)
    got = []
    w = e.workers[("m", 0)]
    orig = w.deliver
    w.deliver = lambda item, ch=None: (got.append(item.round if isinstance(item, Marker) else item.event_time), orig(item, ch))

    def feed():
        for i in range(60):
            if i % 7 == 3:
                e.inject_marker(1000 + i)
            else:
                e.workers[("s", 0)].deliver(Tuple(i, b"k", b""))
            yield e.env.timeout(int(hi * NS_PER_MS / 3) + 1)

    e.env.process(feed())
    e.run()
    assert got == [1000 + i if i % 7 == 3 else i for i in range(60)]


@pytest.mark.parametrize("seed", range(3))
def test_key_affinity_for_tuples_and_hints(seed):
    from keyedprefetch.hints import PrefetchHint

    where: dict = defaultdict(set)
    job, _, spec = make_job("enrich", seed=seed, parallelism=3, key_space=60, distribution="uniform", rate=3000, n=600)
    for (op, j), w in job.engine.workers.items():
        if op != "enrich":
            continue
        od, oh = w.deliver, w.deliver_hint
        w.deliver = lambda item, ch=None, j=j, od=od: (isinstance(item, Tuple) and where[item.key].add(j), od(item, ch))
        w.deliver_hint = lambda item, ch=None, j=j, oh=oh: (isinstance(item, PrefetchHint) and where[item.key].add(j), oh(item, ch))
    from keyedprefetch.bench.workload import generate

    job.engine.attach_source("source", generate(spec))
    job.run_until_drained(limit_ns=10**12)
    assert job.metrics.total("hints_sent") > 0
    assert where and all(len(s) == 1 for s in where.values())


def test_hint_edges_keep_dag():
    g = chain(SOURCE, MAP, MAP, STATEFUL, SINK)
    g.add_hint_edge("op1", "op3")
    g.add_hint_edge("op2", "op3")
    assert g.add_hint_edge("op1", "op3") == []
    with pytest.raises(GraphError):
        g.add_hint_edge("op4", "op3")
    with pytest.raises(GraphError):
        g.add_hint_edge("op3", "op3")
    assert g._topo_order() == g.order
