"""Experiment configuration: one JSON document with six sections.

``topology``, ``workload``, ``backend``, ``cache``, ``prefetching`` and
``run``.  Unknown keys are rejected so typos do not silently fall back to
defaults.  See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..backend import BackendProfile
from ..hints import FilterConfig
from ..manager import PrefetchConfig
from ..stateful import MODES
from .topologies import TopologyConfig
from .workload import WorkloadSpec

ASYNC_POLICIES = ("best", "lru", "clock")


@dataclass
class CacheConfig:
    capacity: int | None = None
    capacity_fraction: float = 0.05
    eviction_buffer_slots: int | None = None
    io_pool_size: int = 4
    async_policy: str = "best"
    max_parked: int = 10_000

    def __post_init__(self) -> None:
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("cache.capacity must be >= 1")
        if not 0 < self.capacity_fraction <= 1:
            raise ValueError("cache.capacity_fraction must be in (0, 1]")
        if self.async_policy not in ASYNC_POLICIES:
            raise ValueError(f"cache.async_policy must be one of {ASYNC_POLICIES}")

    def entries(self, key_space: int, subtasks: int) -> int:
        """Per-subtask capacity: explicit total, or a fraction of the key space, split evenly."""
        total = self.capacity if self.capacity is not None else max(1, int(round(key_space * self.capacity_fraction)))
        return max(1, total // subtasks)


@dataclass
class Perturbation:
    at_ms: float
    action: str
    value: object = None

    def __post_init__(self) -> None:
        if self.action not in ("rewrite_on", "rewrite_off", "read_latency"):
            raise ValueError(f"unknown perturbation {self.action!r}")


@dataclass
class RunConfig:
    mode: str = "keyed-prefetching"
    seed: int = 0
    clock: str = "virtual"
    warmup_factor: float = 5.0
    min_warmup_ms: float = 1000.0
    max_warmup_ms: float = 120_000.0
    measure_ms: float = 10_000.0
    drain_limit_ms: float = 60_000.0
    queue_bound: int = 20_000
    monitor_interval_ms: float = 100.0
    growth_tolerance: float = 0.02
    min_p999_samples: int = 10_000
    timeline_interval_ms: float | None = None
    perturbations: list[Perturbation] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"run.mode must be one of {MODES}")
        if self.clock not in ("virtual", "wallclock"):
            raise ValueError("run.clock must be virtual or wallclock")
        if self.warmup_factor < 0 or self.measure_ms <= 0:
            raise ValueError("warmup_factor must be >= 0 and measure_ms > 0")
        self.perturbations = [p if isinstance(p, Perturbation) else Perturbation(**p) for p in self.perturbations]


@dataclass
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    backend: BackendProfile = field(default_factory=BackendProfile)
    cache: CacheConfig = field(default_factory=CacheConfig)
    prefetching: PrefetchConfig = field(default_factory=PrefetchConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in (("topology", TopologyConfig), ("workload", WorkloadSpec), ("cache", CacheConfig), ("run", RunConfig)):
            if name in d:
                kw[name] = _build(typ, d[name], name)
        if "backend" in d:
            kw["backend"] = BackendProfile.from_dict(d["backend"])
        if "prefetching" in d:
            p = dict(d["prefetching"])
            filt = p.pop("filter", None)
            cfg = _build(PrefetchConfig, p, "prefetching")
            if filt is not None:
                cfg.filter = _build(FilterConfig, filt, "prefetching.filter")
            kw["prefetching"] = cfg
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if f.name == "backend" else asdict(v)
        return out

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        """Return a copy with ``section.key`` (or ``section.sub.key``) replaced and re-validated."""
        d = self.to_dict()
        node = d
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"no config section {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"no config key {dotted!r}")
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _build(typ, d, where: str):
    if is_dataclass(d):
        return d
    names = {f.name for f in fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return typ(**d)
