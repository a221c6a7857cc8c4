"""Experiment plumbing: config files, sweeps, CSV metrics, figures and tables."""
from .config import ConfigError, ExperimentConfig, RunSection, apply_overrides, dump_config, load_config
from .plots import emit_plots
from .report import report_table
from .runner import run_matrix

__all__ = ["ConfigError", "ExperimentConfig", "RunSection", "apply_overrides", "dump_config",
           "load_config", "emit_plots", "report_table", "run_matrix"]
