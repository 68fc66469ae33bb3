"""Config-driven experiment harness and command-line interface."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .report import render_report
from .runner import StaleCacheError, run_experiment, run_stage

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "render_report",
           "StaleCacheError", "run_experiment", "run_stage"]
