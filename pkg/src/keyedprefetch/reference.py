"""Single-threaded reference executor.

Pushes each source record depth-first through the graph with a plain dict
as state.  No caching, no timing, no parallelism: the sink output multiset
it produces is what every execution mode must reproduce.
"""

from __future__ import annotations

import heapq
from collections import Counter
from typing import Iterable, Mapping

from .backend import StateKey
from .dataflow import FILTER, SINK, SOURCE, STATEFUL, ExecutableGraph, Tuple


class ReferenceExecutor:
    def __init__(self, graph: ExecutableGraph, preload=None):
        self.graph = graph
        self.preload = preload
        self.state: dict[tuple[str, StateKey], bytes] = {}
        self.outputs: list[Tuple] = []
        self._succ: dict[str, list[str]] = {op: [] for op in graph.specs}
        for e in graph.edges:
            self._succ[e.src].append(e.dst)

    def run(self, inputs: Mapping[str, Iterable[tuple[int, Tuple]]]) -> list[Tuple]:
        """Feed every source; records from several sources are merged by arrival time."""
        streams = [((at, i, n, t) for n, (at, t) in enumerate(it)) for i, (_, it) in enumerate(sorted(inputs.items()))]
        names = sorted(inputs)
        for at, i, _, t in heapq.merge(*streams):
            self._push(names[i], t)
        return self.outputs

    def _push(self, op: str, t: Tuple) -> None:
        spec = self.graph.specs[op]
        if spec.kind == SINK:
            self.outputs.append(t)
            return
        if spec.kind == SOURCE or spec.fn is None:
            outs = [t]
        elif spec.kind == FILTER:
            outs = [t] if spec.fn(t) else []
        elif spec.kind == STATEFUL:
            outs = self._stateful(op, spec, t)
        else:
            res = spec.fn(t)
            outs = [] if res is None else [res] if isinstance(res, Tuple) else list(res)
        for o in outs:
            for nxt in self._succ[op]:
                self._push(nxt, o)

    def _stateful(self, op, spec, t: Tuple) -> list[Tuple]:
        states = {}
        for sid in spec.state_ids:
            sk = StateKey(t.key, sid)
            if (op, sk) not in self.state:
                v = self.preload(sk) if self.preload is not None else None
                if v is None:
                    v = spec.initial_state(sk) if callable(spec.initial_state) else spec.initial_state
                self.state[(op, sk)] = v
            states[sid] = self.state[(op, sk)]
        res = spec.fn(t, states)
        outs, updates = res if isinstance(res, tuple) else (res, {})
        for sid, value in (updates or {}).items():
            self.state[(op, StateKey(t.key, sid))] = value
        if outs is None:
            return []
        return [outs] if isinstance(outs, Tuple) else list(outs)


def output_multiset(outputs: Iterable[Tuple]) -> Counter:
    return Counter((t.key, t.payload) for t in outputs)
