"""Assemble an engine, its stateful subtasks and (in prefetching mode) the controller."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataflow import Edge, Engine, ExecutableGraph, OperatorSpec, build_graph
from .stateful import KEYED_PREFETCHING, StateConfig, StatefulWorker
from .controller import PrefetchController


@dataclass
class Job:
    engine: Engine
    state: StateConfig
    controller: PrefetchController | None = None

    @property
    def env(self):
        return self.engine.env

    @property
    def metrics(self):
        return self.engine.metrics

    def stateful_workers(self) -> list[StatefulWorker]:
        return [w for w in self.engine.workers.values() if isinstance(w, StatefulWorker)]

    def start(self) -> None:
        if self.controller is not None:
            self.controller.start()

    def run_until_drained(self, limit_ns: int | None = None) -> None:
        self.start()
        self.engine.run_until_drained(limit_ns=limit_ns)
        if self.controller is not None:
            self.controller.stop()

    def flush(self) -> int:
        return sum(w.flush() for w in self.stateful_workers())


def build_job(
    specs: Sequence[OperatorSpec] | ExecutableGraph,
    edges: Sequence[Edge] | None = None,
    *,
    state: StateConfig | None = None,
    seed: int = 0,
    clock: str = "virtual",
    trace: bool = False,
    collect_outputs: bool = False,
) -> Job:
    graph = specs if isinstance(specs, ExecutableGraph) else build_graph(specs, edges or [])
    state = state or StateConfig()
    holder: dict = {}

    def factory(engine, spec, index):
        return StatefulWorker(engine, spec, index, state, holder.get("controller"))

    prefetch = state.mode == KEYED_PREFETCHING
    engine = Engine(
        graph,
        clock=clock,
        seed=seed,
        trace=trace,
        collect_outputs=collect_outputs,
        stateful_factory=factory,
        hint_delay=state.prefetch.hint_delay_ms,
        marker_horizon=state.prefetch.marker_horizon,
    )
    controller = None
    if prefetch:
        controller = PrefetchController(engine, state.prefetch, seed)
        holder["controller"] = controller
        for w in engine.workers.values():
            if isinstance(w, StatefulWorker):
                w.controller = controller
        controller.setup()
    return Job(engine, state, controller)
