"""Keyed prefetching and a timestamp-aware cache on a simulated stream engine."""

from .backend import BackendProfile, LatencyDist, SimBackend, StateKey
from .baselines import ClockCache, LRUCache, make_cache
from .controller import PrefetchController, identify_candidates
from .dataflow import Edge, Engine, OperatorSpec, Tuple, build_graph
from .hints import FilterConfig, HintExtractor, PrefetchHint
from .job import Job, build_job
from .manager import PrefetchConfig, PrefetchManager, select_lookahead
from .sketch import CountMinSketch
from .stateful import MODES, StateConfig, StatefulWorker
from .tac import EvictionBufferFull, TimestampAwareCache

__version__ = "0.1.0"

__all__ = [
    "BackendProfile", "ClockCache", "CountMinSketch", "Edge", "Engine", "EvictionBufferFull",
    "FilterConfig", "HintExtractor", "Job", "LRUCache", "LatencyDist", "MODES", "OperatorSpec",
    "PrefetchConfig", "PrefetchController", "PrefetchHint", "PrefetchManager", "SimBackend",
    "StateConfig", "StateKey", "StatefulWorker", "TimestampAwareCache", "Tuple", "build_graph",
    "build_job", "identify_candidates", "make_cache", "select_lookahead",
]
