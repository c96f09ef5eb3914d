"""Named query shapes used by the harness: enrich, topn, two-stream-join."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from ..backend import LatencyDist, StateKey
from ..dataflow import (
    FILTER, HASH, MAP, SINK, SOURCE, STATEFUL, Edge, OperatorSpec, Tuple,
)
from .workload import key_of, parse_payload

TOPOLOGIES = ("enrich", "topn", "two-stream-join")

_DEFAULT_LOOKAHEADS = {
    "enrich": ["parse", "udf1", "udf2"],
    "topn": ["parse", "udf"],
    "two-stream-join": ["filter_a", "filter_b"],
}


@dataclass
class TopologyConfig:
    name: str = "enrich"
    parallelism: dict[str, int] = field(default_factory=dict)
    default_parallelism: int = 1
    service_ms: dict[str, object] = field(default_factory=dict)
    default_service_ms: float = 0.05
    edge_delay_ms: dict[str, object] = field(default_factory=dict)
    default_edge_delay_ms: float = 0.0
    lookaheads: list[str] | None = None
    state_size: int = 300
    table_size: int | None = None
    topn: int = 5
    join_filter_modulus: int = 7

    def __post_init__(self) -> None:
        if self.name not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.name!r}; expected one of {TOPOLOGIES}")
        if self.default_parallelism < 1 or any(p < 1 for p in self.parallelism.values()):
            raise ValueError("parallelism must be >= 1")


class RewriteSwitch:
    """Mid-pipeline key rewriting toggled by scenario perturbations."""

    def __init__(self, offset: int):
        self.on = False
        self.offset = offset


@dataclass
class Topology:
    name: str
    specs: list[OperatorSpec]
    edges: list[Edge]
    sources: list[str]
    stateful: str
    preload: Callable[[StateKey], bytes | None] | None = None
    rewrite: RewriteSwitch | None = None


def build_topology(cfg: TopologyConfig, key_space: int) -> Topology:
    return {"enrich": _enrich, "topn": _topn, "two-stream-join": _join}[cfg.name](cfg, key_space)


def _spec(cfg: TopologyConfig, op: str, kind: str, fn=None, **kw) -> OperatorSpec:
    return OperatorSpec(
        op, kind,
        parallelism=cfg.parallelism.get(op, cfg.default_parallelism),
        fn=fn,
        service=LatencyDist.parse(cfg.service_ms.get(op, cfg.default_service_ms)),
        **kw,
    )


def _edge(cfg: TopologyConfig, a: str, b: str, mode: str = HASH) -> Edge:
    return Edge(a, b, mode, LatencyDist.parse(cfg.edge_delay_ms.get(f"{a}->{b}", cfg.default_edge_delay_ms)))


def _extractors(cfg: TopologyConfig, op: str, target: str) -> dict:
    chosen = cfg.lookaheads if cfg.lookaheads is not None else _DEFAULT_LOOKAHEADS[cfg.name]
    return {target: _tuple_key} if op in chosen else {}


def _tuple_key(t: Tuple) -> bytes:
    return t.key


def _parse(t: Tuple) -> Tuple:
    _, idx, _ = parse_payload(t.payload)
    return t.derive(key=key_of(idx))


# -- enrich: source -> parse -> udf1 -> udf2 -> enrich -> sink -----------------


def _enrich(cfg: TopologyConfig, key_space: int) -> Topology:
    rewrite = RewriteSwitch(key_space)
    table = cfg.table_size if cfg.table_size is not None else 2 * key_space
    size = cfg.state_size

    def udf1(t: Tuple) -> Tuple:
        if rewrite.on:
            _, idx, _ = parse_payload(t.payload)
            return t.derive(key=key_of(idx + rewrite.offset))
        return t

    def enrich(t: Tuple, states: dict) -> tuple[list[Tuple], dict]:
        row = states[0]
        return [t.derive(payload=t.payload[:32] + b"#" + row[:16])], {}

    def preload(sk: StateKey) -> bytes | None:
        idx = int(sk.partition_key[1:])
        if idx >= table:
            return None
        head = b"row%d:" % idx
        return head + b"r" * max(0, size - len(head))

    specs = [
        _spec(cfg, "source", SOURCE),
        _spec(cfg, "parse", MAP, _parse, key_extractors=_extractors(cfg, "parse", "enrich")),
        _spec(cfg, "udf1", MAP, udf1, key_extractors=_extractors(cfg, "udf1", "enrich")),
        _spec(cfg, "udf2", MAP, lambda t: t, key_extractors=_extractors(cfg, "udf2", "enrich")),
        _spec(cfg, "enrich", STATEFUL, enrich, initial_state=b""),
        _spec(cfg, "sink", SINK),
    ]
    if "source" in (cfg.lookaheads or []):
        specs[0].key_extractors = {"enrich": _tuple_key}
    chain = ["source", "parse", "udf1", "udf2", "enrich", "sink"]
    edges = [_edge(cfg, a, b) for a, b in zip(chain, chain[1:])]
    return Topology("enrich", specs, edges, ["source"], "enrich", preload, rewrite)


# -- topn: source -> parse -> udf -> topn -> sink --------------------------------

_U32 = struct.Struct("<I")


def _topn(cfg: TopologyConfig, key_space: int) -> Topology:
    n = cfg.topn

    def udf(t: Tuple) -> Tuple:
        return t

    def topn(t: Tuple, states: dict) -> tuple[list[Tuple], dict]:
        # score from the sequence number; state keeps the n best, descending
        _, _, seq = parse_payload(t.payload)
        score = (seq * 2654435761) & 0xFFFFFFFF
        cur = states[0] or b""
        best = [_U32.unpack_from(cur, i)[0] for i in range(0, len(cur), 4)]
        if len(best) >= n and score <= best[-1]:
            return [], {}
        best = sorted(best + [score], reverse=True)[:n]
        packed = b"".join(_U32.pack(v) for v in best)
        return [t.derive(payload=b"top|" + packed)], {0: packed}

    specs = [
        _spec(cfg, "source", SOURCE),
        _spec(cfg, "parse", MAP, _parse, key_extractors=_extractors(cfg, "parse", "topn")),
        _spec(cfg, "udf", MAP, udf, key_extractors=_extractors(cfg, "udf", "topn")),
        _spec(cfg, "topn", STATEFUL, topn, initial_state=b""),
        _spec(cfg, "sink", SINK),
    ]
    chain = ["source", "parse", "udf", "topn", "sink"]
    edges = [_edge(cfg, a, b) for a, b in zip(chain, chain[1:])]
    return Topology("topn", specs, edges, ["source"], "topn")


# -- two-stream-join: (a, b) -> filter -> symmetric hash join -> sink ------------


def _join(cfg: TopologyConfig, key_space: int) -> Topology:
    mod = cfg.join_filter_modulus

    def keep(t: Tuple) -> bool:
        _, idx, seq = parse_payload(t.payload)
        return mod <= 1 or (idx + seq) % mod != 0

    def join(t: Tuple, states: dict) -> tuple[list[Tuple], dict]:
        # state 0 holds side-a sequence ids, state 1 side-b; every a/b pair is
        # emitted exactly once, by whichever member arrives second
        side, _, seq = parse_payload(t.payload)
        mine, other = (0, 1) if side == 0 else (1, 0)
        partners = [_U32.unpack_from(states[other], i)[0] for i in range(0, len(states[other]), 4)]
        outs = []
        for p in partners:
            a, b = (seq, p) if side == 0 else (p, seq)
            outs.append(t.derive(payload=b"pair|%d|%d" % (a, b)))
        return outs, {mine: states[mine] + _U32.pack(seq)}

    specs = [
        _spec(cfg, "source_a", SOURCE),
        _spec(cfg, "source_b", SOURCE),
        _spec(cfg, "filter_a", FILTER, keep, key_extractors=_extractors(cfg, "filter_a", "join")),
        _spec(cfg, "filter_b", FILTER, keep, key_extractors=_extractors(cfg, "filter_b", "join")),
        _spec(cfg, "join", STATEFUL, join, state_ids=(0, 1), initial_state=b""),
        _spec(cfg, "sink", SINK),
    ]
    edges = [
        _edge(cfg, "source_a", "filter_a"), _edge(cfg, "source_b", "filter_b"),
        _edge(cfg, "filter_a", "join"), _edge(cfg, "filter_b", "join"),
        _edge(cfg, "join", "sink"),
    ]
    return Topology("two-stream-join", specs, edges, ["source_a", "source_b"], "join")

