"""Prefetching controller: candidate lookaheads, activation and switching.

One controller serves the whole job.  For every stateful operator it keeps
the ordered candidate list (source side first), turns hint extractors on
and off, injects markers, and once per evaluation window folds the
subtasks' verdicts into at most one switch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .backend import NS_PER_MS
from .hashing import key_hash
from .dataflow import Engine, ExecutableGraph, STATEFUL
from .hints import HintExtractor
from .manager import PrefetchConfig

log = logging.getLogger(__name__)

DISCARD_AND_ADVANCE = "discard_and_advance"
RETARGET = "retarget"


@dataclass
class CandidateList:
    stateful_op: str
    candidates: list[str]
    active: str | None = None
    discarded: set[str] = field(default_factory=set)

    @property
    def remaining(self) -> list[str]:
        return [c for c in self.candidates if c not in self.discarded]

    def first_available(self) -> str | None:
        rem = self.remaining
        return rem[0] if rem else None


def identify_candidates(graph: ExecutableGraph, stateful_op: str) -> CandidateList:
    """Upstream operators that can extract ``stateful_op``'s key, in plan order."""
    if graph.specs[stateful_op].kind != STATEFUL:
        raise ValueError(f"{stateful_op!r} is not a keyed-stateful operator")
    ups = graph.ancestors(stateful_op)
    cands = [op for op in graph.order if op in ups and stateful_op in graph.specs[op].key_extractors]
    return CandidateList(stateful_op, cands)


@dataclass
class TimelineEvent:
    time_ns: int
    stateful_op: str
    kind: str
    active: str | None
    detail: str = ""


class PrefetchController:
    """Drives candidate lists for every stateful operator of an engine."""

    def __init__(self, engine: Engine, config: PrefetchConfig, seed: int = 0):
        self.engine = engine
        self.env = engine.env
        self.config = config
        self.seed = seed
        self.lists: dict[str, CandidateList] = {}
        self.timeline: list[TimelineEvent] = []
        self.round = 0
        self._cold: dict[str, int] = {}
        self._extractors: dict[tuple[str, str], list[HintExtractor]] = {}
        self._stopped = False
        self.window_log: list[dict] = []

    # -- setup ------------------------------------------------------------

    def setup(self) -> None:
        """Identify candidates and wire every candidate's hint channels up front,
        so marker copies flow (and slack is measured) before activation."""
        graph = self.engine.graph
        for s in graph.stateful_ops():
            cl = identify_candidates(graph, s)
            self.lists[s] = cl
            self._cold[s] = 0
            if not cl.candidates:
                log.warning("no candidate lookahead for %s; prefetching unavailable", s)
            for c in cl.candidates:
                exts = []

                def factory(worker, c=c, s=s, exts=exts):
                    sketch = self.config.filter.make(key_hash(f"{self.seed}:{c}>{s}:{worker.index}".encode()))
                    ext = HintExtractor(c, s, graph.specs[c].key_extractors[s], sketch)
                    exts.append(ext)
                    return ext

                self.engine.wire_hint_channels(c, s, factory)
                self._extractors[(c, s)] = exts

    def start(self) -> None:
        self.env.process(self._marker_loop())
        self.env.process(self._eval_loop())

    def stop(self) -> None:
        self._stopped = True

    def extractors(self, lookahead: str, stateful_op: str) -> list[HintExtractor]:
        return self._extractors.get((lookahead, stateful_op), [])

    def active_extractors(self, stateful_op: str) -> list[str]:
        cl = self.lists[stateful_op]
        return [c for c in cl.candidates if any(e.active for e in self.extractors(c, stateful_op))]

    # -- requests ---------------------------------------------------------

    def on_cold_miss(self, stateful_op: str) -> None:
        cl = self.lists.get(stateful_op)
        if cl is None or cl.active is not None or not cl.remaining:
            return
        self._cold[stateful_op] += 1
        if self._cold[stateful_op] >= self.config.activation_trigger:
            self.activate(stateful_op)

    def activate(self, stateful_op: str) -> None:
        cl = self.lists[stateful_op]
        if cl.active is not None:
            return
        nxt = cl.first_available()
        if nxt is None:
            if cl.candidates:
                log.warning("all candidates of %s discarded; prefetching stays off", stateful_op)
            return
        cl.active = nxt
        self._log(stateful_op, "activate", nxt)
        self._after(self._delay(), lambda: self._set(nxt, stateful_op, True))

    def handle_switch_request(self, stateful_op: str, kind: str, target: str | None = None,
                              expected_active: str | None = None) -> bool:
        """Apply a discard-and-advance or retarget request; stale requests are ignored."""
        cl = self.lists[stateful_op]
        if expected_active is not None and expected_active != cl.active:
            return False
        old = cl.active
        if kind == DISCARD_AND_ADVANCE:
            if old is None:
                return False
            idx = cl.candidates.index(old)
            cl.discarded.update(cl.candidates[: idx + 1])
            # break before make: the old extractor is not trusted any more
            self._set(old, stateful_op, False)
            nxt = cl.first_available()
            cl.active = nxt
            self._log(stateful_op, "discard", nxt, f"discarded {old}")
            if nxt is None:
                log.warning("discard exhausted the candidates of %s; prefetching off", stateful_op)
            else:
                self._after(self._delay(), lambda: self._set(nxt, stateful_op, True))
            return True
        if kind == RETARGET:
            if target is None or target in cl.discarded or target not in cl.candidates or target == old:
                return False
            cl.active = target
            self._log(stateful_op, "retarget", target, f"from {old}")
            # make before break: the new extractor starts first
            self._after(self._delay(), lambda: self._set(target, stateful_op, True))
            if old is not None:
                self._after(2 * self._delay(), lambda: self._set(old, stateful_op, False) if cl.active != old else None)
            return True
        raise ValueError(f"unknown switch request {kind!r}")

    # -- periodic work ----------------------------------------------------

    def _marker_loop(self):
        period = int(self.config.marker_period_ms * NS_PER_MS)
        while not self._stopped:
            yield self.env.timeout(period)
            if self._stopped:
                return
            self.round += 1
            self.engine.inject_marker(self.round)

    def _eval_loop(self):
        window = int(self.config.eval_window_ms * NS_PER_MS)
        while not self._stopped:
            yield self.env.timeout(window)
            self.evaluate_all()

    def evaluate_all(self) -> None:
        for s, cl in self.lists.items():
            managers = [w.manager for (op, _), w in self.engine.workers.items() if op == s and getattr(w, "manager", None)]
            if not managers:
                continue
            active = cl.active
            decisions = [m.evaluate(cl.remaining, active, self.env.now) for m in managers]
            entry = {
                "time_ns": self.env.now, "stateful_op": s, "active": active,
                "discard": any(d.discard for d in decisions),
                "choices": [d.choice for d in decisions],
                "miss_ratio": max((d.miss_ratio for d in decisions), default=0.0),
            }
            self.window_log.append(entry)
            if active is None:
                continue
            if entry["discard"]:
                self.handle_switch_request(s, DISCARD_AND_ADVANCE, expected_active=active)
                continue
            choices = [d.choice for d in decisions if d.choice is not None]
            if choices:
                target = min(choices, key=cl.candidates.index)
                if target != active:
                    self.handle_switch_request(s, RETARGET, target, expected_active=active)

    # -- helpers ----------------------------------------------------------

    def _delay(self) -> int:
        return int(self.config.control_delay_ms * NS_PER_MS)

    def _after(self, delay_ns: int, fn) -> None:
        if delay_ns <= 0:
            fn()
            return
        self.env.timeout(delay_ns).callbacks.append(lambda _ev: fn())

    def _set(self, lookahead: str, stateful_op: str, on: bool) -> None:
        for ext in self.extractors(lookahead, stateful_op):
            ext.active = on

    def _log(self, stateful_op: str, kind: str, active: str | None, detail: str = "") -> None:
        ev = TimelineEvent(self.env.now, stateful_op, kind, active, detail)
        self.timeline.append(ev)
        log.info("t=%.3fs %s %s -> %s %s", ev.time_ns / 1e9, stateful_op, kind, active, detail)
