"""Workloads, query topologies, experiment runner and reports."""

from .config import CacheConfig, ExperimentConfig, Perturbation, RunConfig
from .harness import (
    Backpressure, RunResult, run_detailed, run_experiment, scenario_dynamic_lookahead,
    sustainable_throughput_search, sweep,
)
from .metrics import MetricsReport, latency_percentiles, min_samples_for
from .topologies import Topology, TopologyConfig, build_topology
from .workload import WorkloadGenerator, WorkloadSpec, generate, key_of, parse_payload

__all__ = [
    "Backpressure", "CacheConfig", "ExperimentConfig", "MetricsReport", "Perturbation", "RunConfig",
    "RunResult", "Topology", "TopologyConfig", "WorkloadGenerator", "WorkloadSpec", "build_topology",
    "generate", "key_of", "latency_percentiles", "min_samples_for", "parse_payload", "run_detailed",
    "run_experiment", "scenario_dynamic_lookahead", "sustainable_throughput_search", "sweep",
]
