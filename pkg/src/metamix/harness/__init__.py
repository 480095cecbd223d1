"""Experiment configuration, single runs, suites and the command line."""

from .config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from .runner import RunOutcome, build_dataset, run_experiment, task_distributions
from .suite import SuiteResult, aggregate_rows, run_suite, suite_variants

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunOutcome",
    "SuiteResult",
    "aggregate_rows",
    "build_dataset",
    "format_config",
    "load_config",
    "parse_config",
    "run_experiment",
    "run_suite",
    "suite_variants",
    "task_distributions",
]
