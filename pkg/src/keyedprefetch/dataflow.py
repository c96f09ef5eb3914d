"""Tuple-at-a-time dataflow engine on a discrete-event clock.

Operators run as logical subtasks (one simpy process each) connected by
ordered per-(upstream subtask, downstream subtask) channels.  Time is kept
in integer nanoseconds.  In ``virtual`` mode the clock jumps from event to
event, so injected delays add up exactly; in ``wallclock`` mode the same
event loop is paced against the monotonic clock and latencies are stamped
with ``time.monotonic_ns``.
"""

from __future__ import annotations

import itertools
import logging
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import simpy
import simpy.rt

from .backend import LatencyDist, NS_PER_MS
from .hashing import key_hash, route

log = logging.getLogger(__name__)

SOURCE, MAP, FILTER, STATEFUL, SINK = "source", "map", "filter", "stateful", "sink"
KINDS = (SOURCE, MAP, FILTER, STATEFUL, SINK)
HASH, FORWARD, BROADCAST = "hash", "forward", "broadcast"
MODES = (HASH, FORWARD, BROADCAST)


class GraphError(ValueError):
    pass


class Tuple:
    """A keyed, event-timestamped record ``(t, k, v)``.

    ``ingest_ns`` is stamped when the record enters its source subtask;
    ``seq`` identifies the originating input record.  ``trace`` collects
    ``(op, arrival, start, end)`` per stage when tracing is on.
    """

    __slots__ = ("event_time", "key", "payload", "ingest_ns", "seq", "trace")

    def __init__(self, event_time: int, key: bytes, payload: bytes, ingest_ns: int = 0, seq: int = 0, trace=None):
        self.event_time = event_time
        self.key = key
        self.payload = payload
        self.ingest_ns = ingest_ns
        self.seq = seq
        self.trace = trace

    def derive(self, key: bytes | None = None, payload: bytes | None = None) -> "Tuple":
        return Tuple(
            self.event_time,
            self.key if key is None else key,
            self.payload if payload is None else payload,
            self.ingest_ns,
            self.seq,
            None if self.trace is None else list(self.trace),
        )

    def __repr__(self) -> str:
        return f"Tuple(t={self.event_time}, k={self.key!r}, v={self.payload[:24]!r})"


@dataclass(frozen=True)
class Marker:
    round: int
    origin: str | None = None
    inject_ns: int = 0


@dataclass(frozen=True)
class LatencyRecord:
    output_ns: int
    latency_ns: int
    sink: str
    ingest_ns: int


@dataclass
class OperatorSpec:
    """One logical operator.

    ``fn`` depends on ``kind``: map/source return an output tuple, an
    iterable of tuples, or None; filter returns a bool; stateful gets
    ``(tuple, states)`` where ``states`` maps state id to bytes and returns
    ``(outputs, updates)``.  ``key_extractors`` maps a downstream stateful
    operator id to a function of an *output* tuple returning that
    operator's state-access key.
    """

    id: str
    kind: str
    parallelism: int = 1
    fn: Callable | None = None
    key_extractors: Mapping[str, Callable[[Tuple], bytes]] = field(default_factory=dict)
    service: LatencyDist = field(default_factory=lambda: LatencyDist.fixed(0.0))
    state_ids: tuple[int, ...] = (0,)
    initial_state: Callable | bytes = b""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise GraphError(f"unknown operator kind {self.kind!r}")
        if self.parallelism < 1:
            raise GraphError(f"{self.id}: parallelism must be >= 1")
        self.service = LatencyDist.parse(self.service)
        self.key_extractors = dict(self.key_extractors)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    mode: str = HASH
    delay: LatencyDist = LatencyDist.fixed(0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "delay", LatencyDist.parse(self.delay))


@dataclass(frozen=True)
class ChannelSpec:
    src: tuple[str, int]
    dst: tuple[str, int]
    edge: Edge | None
    kind: str = "data"


class ExecutableGraph:
    """Validated operator DAG plus its subtask-level channel layout."""

    def __init__(self, specs: Sequence[OperatorSpec], edges: Sequence[Edge]):
        self.specs: dict[str, OperatorSpec] = {}
        for s in specs:
            if s.id in self.specs:
                raise GraphError(f"duplicate operator id {s.id!r}")
            self.specs[s.id] = s
        self.edges = [e if isinstance(e, Edge) else Edge(*e) for e in edges]
        self.down: dict[str, list[Edge]] = defaultdict(list)
        self.up: dict[str, list[Edge]] = defaultdict(list)
        for e in self.edges:
            if e.src not in self.specs or e.dst not in self.specs:
                raise GraphError(f"dangling edge {e.src!r} -> {e.dst!r}")
            if e.mode not in MODES:
                raise GraphError(f"unknown partitioning mode {e.mode!r}")
            self.down[e.src].append(e)
            self.up[e.dst].append(e)
        self._validate()
        self.order = self._topo_order()
        self.depth = self._depths()
        self.hint_edges: list[tuple[str, str]] = []
        self.channels = self._layout()

    # -- validation -------------------------------------------------------

    def _validate(self) -> None:
        for op, spec in self.specs.items():
            if spec.kind == SOURCE and self.up[op]:
                raise GraphError(f"source {op!r} has inputs")
            if spec.kind != SOURCE and not self.up[op]:
                raise GraphError(f"operator {op!r} has no inputs")
            if spec.kind == SINK and self.down[op]:
                raise GraphError(f"sink {op!r} has outputs")
            if spec.kind == STATEFUL:
                for e in self.up[op]:
                    if e.mode != HASH:
                        raise GraphError(f"keyed-stateful operator {op!r} fed by non-hash edge from {e.src!r}")
        for e in self.edges:
            if e.mode == FORWARD and self.specs[e.src].parallelism != self.specs[e.dst].parallelism:
                raise GraphError(f"forward edge {e.src}->{e.dst} needs equal parallelism")
        if not self.specs:
            raise GraphError("empty graph")
        # weak connectivity
        seen, stack = set(), [next(iter(self.specs))]
        while stack:
            op = stack.pop()
            if op in seen:
                continue
            seen.add(op)
            stack.extend(e.dst for e in self.down[op])
            stack.extend(e.src for e in self.up[op])
        if len(seen) != len(self.specs):
            raise GraphError("graph is not connected")

    def _topo_order(self) -> list[str]:
        indeg = {op: len(self.up[op]) for op in self.specs}
        ready = deque(op for op in self.specs if indeg[op] == 0)
        order = []
        while ready:
            op = ready.popleft()
            order.append(op)
            for e in self.down[op]:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        if len(order) != len(self.specs):
            raise GraphError("cycle detected")
        return order

    def _depths(self) -> dict[str, int]:
        depth = {}
        for op in self.order:
            depth[op] = max((depth[e.src] + 1 for e in self.up[op]), default=0)
        return depth

    def _layout(self) -> list[ChannelSpec]:
        out = []
        for e in self.edges:
            ps, pd = self.specs[e.src].parallelism, self.specs[e.dst].parallelism
            if e.mode == FORWARD:
                out.extend(ChannelSpec((e.src, i), (e.dst, i), e) for i in range(ps))
            else:
                out.extend(ChannelSpec((e.src, i), (e.dst, j), e) for i in range(ps) for j in range(pd))
        return out

    # -- queries ----------------------------------------------------------

    @property
    def workers(self) -> list[tuple[str, int]]:
        return [(op, i) for op in self.order for i in range(self.specs[op].parallelism)]

    def ancestors(self, op: str) -> set[str]:
        seen, stack = set(), [e.src for e in self.up[op]]
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(e.src for e in self.up[u])
        return seen

    def sources(self) -> list[str]:
        return [op for op in self.order if self.specs[op].kind == SOURCE]

    def stateful_ops(self) -> list[str]:
        return [op for op in self.order if self.specs[op].kind == STATEFUL]

    def add_hint_edge(self, lookahead: str, stateful: str) -> list[ChannelSpec]:
        """Register a hint side channel; it must point downstream so the graph stays a DAG."""
        if lookahead not in self.ancestors(stateful):
            raise GraphError(f"hint edge {lookahead}->{stateful} would not point downstream")
        if (lookahead, stateful) in self.hint_edges:
            return []
        self.hint_edges.append((lookahead, stateful))
        ps, pd = self.specs[lookahead].parallelism, self.specs[stateful].parallelism
        chans = [ChannelSpec((lookahead, i), (stateful, j), None, "hint") for i in range(ps) for j in range(pd)]
        self.channels.extend(chans)
        return chans


def build_graph(specs: Sequence[OperatorSpec], edges: Sequence[Edge | tuple]) -> ExecutableGraph:
    return ExecutableGraph(specs, edges)


def end_to_end_latency(record: Tuple, output_ns: int) -> int:
    if record.ingest_ns is None:
        raise ValueError("tuple carries no ingest timestamp")
    return output_ns - record.ingest_ns


def decompose(trace: Sequence[tuple[str, int, int, int]], output_ns: int) -> tuple[list[int], list[int], list[int]]:
    """Split a stage trace into queuing, processing and communication times."""
    q = [start - arrival for _, arrival, start, _ in trace]
    p = [end - start for _, _, start, end in trace]
    c = [trace[i + 1][1] - trace[i][3] for i in range(len(trace) - 1)]
    return q, p, c


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------


class Signal:
    """Wake-all condition for simpy processes."""

    def __init__(self, env: simpy.Environment):
        self.env = env
        self._ev: simpy.Event | None = None

    def wait(self) -> simpy.Event:
        if self._ev is None or self._ev.triggered:
            self._ev = self.env.event()
        return self._ev

    def notify(self) -> None:
        ev = self._ev
        if ev is not None and not ev.triggered:
            ev.succeed()


class Metrics:
    """Counters plus raw latency samples for one engine run."""

    def __init__(self):
        self.counters: dict[str, int] = defaultdict(int)
        self.latencies: list[LatencyRecord] = []
        self.outputs: list[tuple[str, bytes, bytes]] = []
        self.traces: list[tuple[list, int, int]] = []

    def incr(self, name: str, n: int = 1) -> None:
        self.counters[name] += n

    def get(self, name: str) -> int:
        return self.counters.get(name, 0)

    def total(self, suffix: str) -> int:
        return sum(v for k, v in self.counters.items() if k.endswith("." + suffix) or k == suffix)

    def snapshot(self) -> dict[str, int]:
        return dict(self.counters)


class Channel:
    """Ordered point-to-point link; delivery never overtakes an earlier send."""

    __slots__ = ("env", "engine", "dst", "delay", "rng", "kind", "last", "sent", "spec", "_zero")

    def __init__(self, engine, dst, delay: LatencyDist, rng, kind: str, spec: ChannelSpec):
        self.engine = engine
        self.env = engine.env
        self.dst = dst
        self.delay = delay
        self.rng = rng
        self.kind = kind
        self.last = 0
        self.sent = 0
        self.spec = spec
        self._zero = delay.is_zero

    def send(self, item) -> None:
        now = self.env.now
        at = now if self._zero else now + self.delay.sample_ns(self.rng)
        if at < self.last:
            at = self.last
        self.last = at
        self.sent += 1
        deliver = self.dst.deliver_hint if self.kind == "hint" else self.dst.deliver
        if at == now:
            deliver(item, self)
            return
        engine = self.engine
        engine.in_transit += 1

        def arrive(_ev, item=item):
            engine.in_transit -= 1
            deliver(item, self)

        self.env.timeout(at - now).callbacks.append(arrive)


class Worker:
    """Sequential worker for one subtask of a stateless operator."""

    def __init__(self, engine: "Engine", spec: OperatorSpec, index: int):
        self.engine = engine
        self.env = engine.env
        self.spec = spec
        self.op = spec.id
        self.index = index
        self.name = f"{spec.id}[{index}]"
        self.inbox: deque = deque()
        self.wake = Signal(self.env)
        self.ports: list[tuple[Edge, list[Channel]]] = []
        self.hint_ports: dict[str, list[Channel]] = {}
        self.extractors: dict = {}
        self.n_inputs = 1 if spec.kind == SOURCE else 0
        self._marker_counts: dict[int, int] = defaultdict(int)
        self.rng = engine.rng_for(self.name)
        self.busy_ns = 0
        self.processed = 0
        self._busy = 0

    # -- inputs -----------------------------------------------------------

    def deliver(self, item, channel=None) -> None:
        self.inbox.append((item, self.engine.now_ns()))
        self.wake.notify()

    def deliver_hint(self, item, channel=None) -> None:  # pragma: no cover - only stateful ops take hints
        raise GraphError(f"{self.name} does not accept hints")

    @property
    def backlog(self) -> int:
        return len(self.inbox)

    def is_idle(self) -> bool:
        return not self.inbox and self._busy == 0

    # -- outputs ----------------------------------------------------------

    def emit(self, t: Tuple) -> None:
        for edge, chans in self.ports:
            if edge.mode == HASH:
                chans[route(t.key, len(chans))].send(t)
            elif edge.mode == FORWARD:
                chans[0].send(t)
            else:
                for ch in chans:
                    ch.send(t.derive())

    def broadcast_marker(self, m: Marker) -> None:
        for _, chans in self.ports:
            for ch in chans:
                ch.send(m)

    # -- main loop --------------------------------------------------------

    def run(self) -> Iterator[simpy.Event]:
        inbox = self.inbox
        while True:
            if not inbox:
                yield self.wake.wait()
                continue
            item, arrived = inbox.popleft()
            self._busy = 1
            if isinstance(item, Marker):
                yield from self.on_marker(item)
            else:
                yield from self.on_tuple(item, arrived)
            self._busy = 0

    def service_ns(self) -> int:
        return self.spec.service.sample_ns(self.rng)

    def on_marker(self, m: Marker):
        self._marker_counts[m.round] += 1
        if self._marker_counts[m.round] < self.n_inputs:
            return
        del self._marker_counts[m.round]
        for r in [r for r in self._marker_counts if r < m.round - self.engine.marker_horizon]:
            del self._marker_counts[r]
        p = self.service_ns()
        if p:
            yield self.env.timeout(p)
        self.broadcast_marker(m)
        for target, ext in self.extractors.items():
            copy = Marker(m.round, self.op, m.inject_ns)
            for ch in self.hint_ports.get(target, ()):
                ch.send(copy)

    def on_tuple(self, t: Tuple, arrived: int):
        start = self.env.now
        p = self.service_ns()
        if p:
            yield self.env.timeout(p)
        self.busy_ns += p
        self.processed += 1
        outs = self.apply(t)
        if t.trace is not None:
            stamp = (self.op, arrived, start, self.env.now)
            for o in outs:
                o.trace.append(stamp)
        self.finish(t, outs)

    def apply(self, t: Tuple) -> list[Tuple]:
        kind, fn = self.spec.kind, self.spec.fn
        if kind == FILTER:
            return [t] if fn(t) else []
        if kind == SINK or fn is None:
            return [t]
        res = fn(t)
        if res is None:
            return []
        if isinstance(res, Tuple):
            return [res]
        return list(res)

    def finish(self, t: Tuple, outs: list[Tuple]) -> None:
        if self.spec.kind == SINK:
            for o in outs:
                self.engine.record_output(self, o)
            return
        for o in outs:
            self.emit(o)
        if self.extractors:
            for target, ext in self.extractors.items():
                if not ext.active:
                    continue
                chans = self.hint_ports[target]
                for o in outs:
                    hint = ext.process(o)
                    if hint is not None:
                        chans[route(hint.key, len(chans))].send(hint)
                        self.engine.metrics.incr(f"{self.op}.hints_sent")


class Engine:
    """Instantiates workers and channels for a graph and runs them."""

    def __init__(
        self,
        graph: ExecutableGraph,
        *,
        clock: str = "virtual",
        seed: int = 0,
        metrics: Metrics | None = None,
        trace: bool = False,
        collect_outputs: bool = False,
        stateful_factory: Callable[["Engine", OperatorSpec, int], Worker] | None = None,
        hint_delay: LatencyDist | float = 0.0,
        marker_horizon: int = 64,
    ):
        if clock == "virtual":
            self.env = simpy.Environment()
            self._wall0 = None
        elif clock == "wallclock":
            self.env = simpy.rt.RealtimeEnvironment(factor=1e-9, strict=False)
            self._wall0 = time.monotonic_ns()
        else:
            raise ValueError(f"unknown clock mode {clock!r}")
        self.clock = clock
        self.graph = graph
        self.seed = seed
        self.metrics = metrics or Metrics()
        self.trace = trace
        self.collect_outputs = collect_outputs
        self.hint_delay = LatencyDist.parse(hint_delay)
        self.marker_horizon = marker_horizon
        self._seq = itertools.count()
        self._rngs = np.random.SeedSequence(seed)
        self._rng_cache: dict[str, np.random.Generator] = {}
        self.workers: dict[tuple[str, int], Worker] = {}
        for op, i in graph.workers:
            spec = graph.specs[op]
            if spec.kind == STATEFUL:
                if stateful_factory is None:
                    raise GraphError("graph has stateful operators but no stateful_factory")
                w = stateful_factory(self, spec, i)
            else:
                w = Worker(self, spec, i)
            self.workers[(op, i)] = w
        for edge in graph.edges:
            pd = graph.specs[edge.dst].parallelism
            for i in range(graph.specs[edge.src].parallelism):
                src = self.workers[(edge.src, i)]
                if edge.mode == FORWARD:
                    targets = [i]
                else:
                    targets = list(range(pd))
                chans = []
                for j in targets:
                    dst = self.workers[(edge.dst, j)]
                    spec = ChannelSpec((edge.src, i), (edge.dst, j), edge)
                    chans.append(Channel(self, dst, edge.delay, self.rng_for(f"ch:{edge.src}>{edge.dst}:{i}>{j}"), "data", spec))
                    dst.n_inputs += 1
                src.ports.append((edge, chans))
        self.in_transit = 0
        self._stopped = False
        self._sources_done = 0
        self.source_tasks: list = []
        self.started = False
        for w in self.workers.values():
            self.env.process(w.run())

    # -- time -------------------------------------------------------------

    def now_ns(self) -> int:
        if self._wall0 is None:
            return self.env.now
        return time.monotonic_ns() - self._wall0

    def rng_for(self, name: str) -> np.random.Generator:
        rng = self._rng_cache.get(name)
        if rng is None:
            rng = np.random.default_rng([self.seed, key_hash(name.encode())])
            self._rng_cache[name] = rng
        return rng

    # -- wiring -----------------------------------------------------------

    def wire_hint_channels(self, lookahead: str, stateful: str, extractor_factory: Callable[[Worker], object]) -> None:
        """Create hint side channels lookahead -> stateful and attach an extractor per lookahead subtask."""
        self.graph.add_hint_edge(lookahead, stateful)
        pd = self.graph.specs[stateful].parallelism
        for i in range(self.graph.specs[lookahead].parallelism):
            src = self.workers[(lookahead, i)]
            chans = []
            for j in range(pd):
                dst = self.workers[(stateful, j)]
                spec = ChannelSpec((lookahead, i), (stateful, j), None, "hint")
                chans.append(Channel(self, dst, self.hint_delay, self.rng_for(f"hint:{lookahead}>{stateful}:{i}>{j}"), "hint", spec))
                dst.expect_hint_copies(lookahead)
            src.hint_ports[stateful] = chans
            src.extractors[stateful] = extractor_factory(src)

    # -- sources and markers ---------------------------------------------

    def attach_source(self, op: str, records: Iterable[tuple[int, Tuple]]) -> None:
        """Feed ``(arrival_ns, tuple)`` pairs (non-decreasing arrival) into ``op``'s subtasks, partitioned by key hash."""
        if self.graph.specs[op].kind != SOURCE:
            raise GraphError(f"{op!r} is not a source")
        self.source_tasks.append(self.env.process(self._feed(op, iter(records))))

    def _feed(self, op: str, records: Iterator[tuple[int, Tuple]]):
        par = self.graph.specs[op].parallelism
        subtasks = [self.workers[(op, i)] for i in range(par)]
        n = 0
        for at, t in records:
            if self._stopped:
                break
            if at > self.env.now:
                yield self.env.timeout(at - self.env.now)
                if self._stopped:
                    break
            t.ingest_ns = self.now_ns()
            if self.trace and t.trace is None:
                t.trace = []
            subtasks[route(t.key, par)].deliver(t)
            n += 1
        self._sources_done += 1
        self.metrics.incr(f"{op}.ingested", n)

    @property
    def sources_done(self) -> bool:
        return self._sources_done >= len(self.source_tasks)

    def stop_sources(self) -> None:
        self._stopped = True

    def inject_marker(self, round: int) -> None:
        m = Marker(round, None, self.now_ns())
        for op in self.graph.sources():
            for i in range(self.graph.specs[op].parallelism):
                self.workers[(op, i)].deliver(m)
        self.metrics.incr("markers_injected")

    # -- outputs ----------------------------------------------------------

    def record_output(self, sink: Worker, t: Tuple) -> None:
        now = self.now_ns()
        self.metrics.latencies.append(LatencyRecord(now, end_to_end_latency(t, now), sink.op, t.ingest_ns))
        if self.collect_outputs:
            self.metrics.outputs.append((sink.op, t.key, t.payload))
        if t.trace is not None:
            self.metrics.traces.append((t.trace, now, t.ingest_ns))

    def backlog(self) -> int:
        return sum(w.backlog for w in self.workers.values())

    def run(self, until: int | None = None) -> None:
        self.started = True
        self.env.run(until=until)

    def run_until_drained(self, poll_ns: int = NS_PER_MS, limit_ns: int | None = None) -> None:
        """Run until sources are exhausted and every queue is empty."""

        def watcher():
            while True:
                yield self.env.timeout(poll_ns)
                if self.sources_done and self.idle():
                    return
                if limit_ns is not None and self.env.now >= limit_ns:
                    return

        self.started = True
        self.env.run(until=self.env.process(watcher()))

    def idle(self) -> bool:
        return self.in_transit == 0 and all(w.is_idle() for w in self.workers.values())
