"""Data-free class-incremental learning with consistency-enhanced replay and a debiased head."""

from .analysis import MetricsRecord, incremental_accuracy
from .config import ExperimentConfig, resolve_config
from .errors import ConfigError, DatasetMissingError, NonFiniteLossError, StageOrderError
from .pipeline import run_ablation_suite, run_experiment

__all__ = [
    "ConfigError", "DatasetMissingError", "ExperimentConfig", "MetricsRecord", "NonFiniteLossError",
    "StageOrderError", "incremental_accuracy", "resolve_config", "run_ablation_suite", "run_experiment",
]
__version__ = "0.1.0"
