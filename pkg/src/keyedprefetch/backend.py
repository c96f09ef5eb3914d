"""Latency-injecting keyed state backend.

``SimBackend`` stands in for an embedded (RocksDB-like) or disaggregated
(Redis-like) store.  It keeps values in a dict and charges simulated time
for every access; at most ``max_concurrent_ios`` operations are in service
at once and the rest queue FIFO.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np
import simpy

NS_PER_MS = 1_000_000

StateObject = bytes


class StateKey(NamedTuple):
    partition_key: bytes
    state_id: int = 0


class BackendError(RuntimeError):
    pass


class BackendShutdown(BackendError):
    pass


@dataclass(frozen=True)
class LatencyDist:
    """Latency distribution in milliseconds: fixed, uniform(lo, hi) or lognormal(mu, sigma)."""

    kind: str = "fixed"
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown latency distribution {self.kind!r}")
        if self.kind == "fixed" and self.a < 0:
            raise ValueError("latency must be >= 0")
        if self.kind == "uniform" and not 0 <= self.a <= self.b:
            raise ValueError("uniform latency needs 0 <= lo <= hi")
        if self.kind == "lognormal" and self.b < 0:
            raise ValueError("lognormal sigma must be >= 0")

    @classmethod
    def fixed(cls, ms: float) -> "LatencyDist":
        return cls("fixed", ms)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "LatencyDist":
        return cls("uniform", lo, hi)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LatencyDist":
        return cls("lognormal", mu, sigma)

    @classmethod
    def parse(cls, spec) -> "LatencyDist":
        """Accept a number (fixed ms), a dict like ``{"kind": "uniform", "lo": 1, "hi": 2}``
        or an existing ``LatencyDist``."""
        if isinstance(spec, LatencyDist):
            return spec
        if isinstance(spec, (int, float)):
            return cls.fixed(float(spec))
        kind = spec.get("kind", "fixed")
        if kind == "fixed":
            return cls.fixed(float(spec.get("ms", spec.get("value", 0.0))))
        if kind == "uniform":
            return cls.uniform(float(spec["lo"]), float(spec["hi"]))
        if kind == "lognormal":
            return cls.lognormal(float(spec["mu"]), float(spec["sigma"]))
        raise ValueError(f"unknown latency distribution {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "ms": self.a}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.a, "hi": self.b}
        return {"kind": "lognormal", "mu": self.a, "sigma": self.b}

    def scaled(self, factor: float) -> "LatencyDist":
        if self.kind == "lognormal":
            return LatencyDist("lognormal", self.a + math.log(factor), self.b)
        return LatencyDist(self.kind, self.a * factor, self.b * factor)

    def sample_ns(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            ms = self.a
        elif self.kind == "uniform":
            ms = rng.uniform(self.a, self.b)
        else:
            ms = rng.lognormal(self.a, self.b)
        return int(round(ms * NS_PER_MS))

    @property
    def is_zero(self) -> bool:
        return self.kind == "fixed" and self.a == 0.0


@dataclass
class BackendProfile:
    read_latency: LatencyDist = field(default_factory=lambda: LatencyDist.fixed(0.5))
    write_latency: LatencyDist = field(default_factory=lambda: LatencyDist.fixed(0.5))
    absent_key_fastpath: bool = True
    fastpath_latency_ms: float = 0.05
    max_concurrent_ios: int = 4

    def __post_init__(self) -> None:
        self.read_latency = LatencyDist.parse(self.read_latency)
        self.write_latency = LatencyDist.parse(self.write_latency)
        if self.max_concurrent_ios < 1:
            raise ValueError("max_concurrent_ios must be >= 1")
        if self.fastpath_latency_ms < 0:
            raise ValueError("fastpath latency must be >= 0")

    @classmethod
    def local_ssd(cls, **kw) -> "BackendProfile":
        return cls(read_latency=LatencyDist.fixed(0.5), write_latency=LatencyDist.fixed(0.5), **kw)

    @classmethod
    def remote(cls, **kw) -> "BackendProfile":
        return cls(read_latency=LatencyDist.fixed(2.0), write_latency=LatencyDist.fixed(2.0), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendProfile":
        d = dict(d)
        preset = d.pop("preset", None)
        base = {"local-ssd": cls.local_ssd, "remote": cls.remote, None: cls}[preset]()
        for name in ("read_latency", "write_latency"):
            if name in d:
                setattr(base, name, LatencyDist.parse(d.pop(name)))
        for name in ("absent_key_fastpath", "fastpath_latency_ms", "max_concurrent_ios"):
            if name in d:
                setattr(base, name, d.pop(name))
        if d:
            raise ValueError(f"unknown backend keys: {sorted(d)}")
        base.__post_init__()
        return base

    def to_dict(self) -> dict:
        return {
            "read_latency": self.read_latency.to_dict(),
            "write_latency": self.write_latency.to_dict(),
            "absent_key_fastpath": self.absent_key_fastpath,
            "fastpath_latency_ms": self.fastpath_latency_ms,
            "max_concurrent_ios": self.max_concurrent_ios,
        }


class SimBackend:
    """One embedded store instance, owned by a single stateful subtask.

    ``get`` and ``put`` are simpy process generators: call them with
    ``yield from`` (or wrap with ``env.process``).  ``preload`` optionally
    supplies values for keys that were never written, which models a large
    static table without materialising it.
    """

    def __init__(
        self,
        env: simpy.Environment,
        profile: BackendProfile | None = None,
        rng: np.random.Generator | None = None,
        preload: Callable[[StateKey], StateObject | None] | None = None,
    ):
        self.env = env
        self.profile = profile or BackendProfile()
        self.rng = rng or np.random.default_rng(0)
        self.preload = preload
        self._data: dict[StateKey, StateObject] = {}
        self._io = simpy.Resource(env, capacity=self.profile.max_concurrent_ios)
        self._closed = False
        self._write_failures = 0
        self.reads = 0
        self.writes = 0
        self.busy_ns = 0

    # -- simulated I/O --------------------------------------------------

    def get(self, key: StateKey) -> Iterator[simpy.Event]:
        self._check_open()
        with self._io.request() as req:
            yield req
            self._check_open()
            value = self._lookup(key)
            if value is None and self.profile.absent_key_fastpath:
                delay = int(round(self.profile.fastpath_latency_ms * NS_PER_MS))
            else:
                delay = self.profile.read_latency.sample_ns(self.rng)
            if delay:
                yield self.env.timeout(delay)
            self.busy_ns += delay
        self.reads += 1
        # re-read: a put that completed while we were in service wins
        return self._lookup(key)

    def put(self, key: StateKey, value: StateObject) -> Iterator[simpy.Event]:
        self._check_open()
        with self._io.request() as req:
            yield req
            self._check_open()
            delay = self.profile.write_latency.sample_ns(self.rng)
            if delay:
                yield self.env.timeout(delay)
            self.busy_ns += delay
            if self._write_failures:
                self._write_failures -= 1
                raise BackendError(f"injected write failure for {key!r}")
            self._data[key] = bytes(value)
        self.writes += 1

    @property
    def in_service(self) -> int:
        return self._io.count

    @property
    def queued(self) -> int:
        return len(self._io.queue)

    def shutdown(self) -> None:
        self._closed = True

    def fail_next_writes(self, n: int) -> None:
        """Make the next ``n`` puts raise ``BackendError`` (fault injection for tests)."""
        self._write_failures += n

    # -- untimed access ---------------------------------------------------

    def peek(self, key: StateKey) -> StateObject | None:
        return self._lookup(key)

    def load_value(self, key: StateKey, value: StateObject) -> None:
        self._data[key] = bytes(value)

    def items(self):
        return self._data.items()

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: StateKey) -> bool:
        return key in self._data

    def dump(self, path: str | Path) -> int:
        return dump_state(self._data, path)

    def load(self, path: str | Path) -> int:
        data = load_state(path)
        self._data.update(data)
        return len(data)

    def _lookup(self, key: StateKey) -> StateObject | None:
        value = self._data.get(key)
        if value is None and self.preload is not None:
            value = self.preload(key)
        return value

    def _check_open(self) -> None:
        if self._closed:
            raise BackendShutdown("backend shut down")


# -- persistence format -------------------------------------------------------
# Records: <u32 key_len><key><u32 value_len><value>, all little-endian.
# Key bytes are a <u16 state_id> followed by the partition key.

_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def encode_state_key(key: StateKey) -> bytes:
    return _U16.pack(key.state_id) + key.partition_key


def decode_state_key(raw: bytes) -> StateKey:
    (sid,) = _U16.unpack_from(raw)
    return StateKey(raw[2:], sid)


def dump_state(data: dict[StateKey, StateObject], path: str | Path) -> int:
    with open(path, "wb") as fh:
        for key, value in data.items():
            kb = encode_state_key(key)
            fh.write(_U32.pack(len(kb)))
            fh.write(kb)
            fh.write(_U32.pack(len(value)))
            fh.write(value)
    return len(data)


def load_state(path: str | Path) -> dict[StateKey, StateObject]:
    raw = Path(path).read_bytes()
    out: dict[StateKey, StateObject] = {}
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise ValueError("truncated state file")
        (klen,) = _U32.unpack_from(raw, pos)
        pos += 4
        kb = raw[pos : pos + klen]
        pos += klen
        if pos + 4 > len(raw):
            raise ValueError("truncated state file")
        (vlen,) = _U32.unpack_from(raw, pos)
        pos += 4
        value = raw[pos : pos + vlen]
        if len(value) != vlen or len(kb) != klen:
            raise ValueError("truncated state file")
        pos += vlen
        out[decode_state_key(kb)] = value
    return out
