"""Deterministic discrete-event benchmark harness comparing Chord, Pastry,
and Kademlia as decentralized agent-directory substrates."""

from .config import BenchmarkConfig, ConfigError, load_config, parse_config, preset
from .ids import AgentDescriptor, DescriptorStore, fnv1a64, hash_skill
from .metrics import MetricsRecord, aggregate_runs, compute_p95, compute_record
from .runner import run_benchmark
from .sim import Network, Simulator, build_er_underlay
from .workload import BenchmarkRun, Catalog, ChurnProcess

__version__ = "0.1.0"

__all__ = [
    "AgentDescriptor",
    "BenchmarkConfig",
    "BenchmarkRun",
    "Catalog",
    "ChurnProcess",
    "ConfigError",
    "DescriptorStore",
    "MetricsRecord",
    "Network",
    "Simulator",
    "aggregate_runs",
    "build_er_underlay",
    "compute_p95",
    "compute_record",
    "fnv1a64",
    "hash_skill",
    "load_config",
    "parse_config",
    "preset",
    "run_benchmark",
]
