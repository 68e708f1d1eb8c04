"""Experiment driver: configuration, checkpoint files, pipeline, plots, CLI."""

from .checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, ExperimentConfig, apply_overrides, load_config, preset
from .pipeline import REPORT_COLUMNS, RunResult, run_experiment

__all__ = ["CheckpointError", "load_checkpoint", "save_checkpoint", "PRESETS", "ConfigError",
           "ExperimentConfig", "apply_overrides", "load_config", "preset", "REPORT_COLUMNS",
           "RunResult", "run_experiment"]
