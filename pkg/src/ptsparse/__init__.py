"""Post-training sparsity toolkit: prune small pre-trained networks with a
tiny calibration set via a base-decayed KL objective, evolutionary sparsity
distribution search, and iteration-wise dynamic sparse training."""

from . import data, harness, nn, objectives, search, sparsity, training
from .config import ConfigError, ExperimentConfig, parse_config
from .harness import MetricsRow, StageError, run_experiment

__version__ = "0.1.0"

__all__ = [
    "data", "harness", "nn", "objectives", "search", "sparsity", "training",
    "ConfigError", "ExperimentConfig", "parse_config", "MetricsRow",
    "StageError", "run_experiment", "__version__",
]
