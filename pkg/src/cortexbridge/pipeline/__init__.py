"""Synthetic data, experiment configuration, stages, report and CLI."""
from .config import ExperimentConfig
from .stages import STAGES, run_stage
from .synthetic import SyntheticDatasetSpec, make_synthetic_dataset, run_downsample

__all__ = ["ExperimentConfig", "STAGES", "SyntheticDatasetSpec", "make_synthetic_dataset", "run_downsample", "run_stage"]
