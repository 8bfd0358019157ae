"""Experiment harness: workloads, configs, metrics, presets, CLI."""
from .config import ExperimentConfig, load_config, parse_config
from .metrics import METRICS_HEADER, MetricsRecord, read_metrics, write_metrics
from .runner import RunResult, compare_runs, run_experiment
from .workloads import Workload, generate_workload

__all__ = [
    "ExperimentConfig",
    "METRICS_HEADER",
    "MetricsRecord",
    "RunResult",
    "Workload",
    "compare_runs",
    "generate_workload",
    "load_config",
    "parse_config",
    "read_metrics",
    "run_experiment",
    "write_metrics",
]
