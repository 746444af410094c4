"""Retrieval-augmented wrapper for inductive spatio-temporal kriging under missing data."""
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError
from .model import VARIANTS, build_model
from .pipeline import Dataset, load_dataset, run_single, synthetic_dataset

__all__ = ["ConfigError", "DataError", "Dataset", "ExperimentConfig", "VARIANTS", "build_model",
           "load_config", "load_dataset", "run_single", "synthetic_dataset"]
__version__ = "0.1.0"
