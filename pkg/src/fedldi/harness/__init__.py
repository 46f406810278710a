"""Configuration, experiment pipeline, baselines, plot data and the CLI."""

from .baselines import baseline_lastlayer, baseline_uniform
from .config import FLRunConfig, config_hash, config_to_dict, parse_config
from .pipeline import ExperimentReport, run_dp_sweep, run_experiment
from .plotdata import emit_plotdata

__all__ = ["FLRunConfig", "parse_config", "config_to_dict", "config_hash", "ExperimentReport",
           "run_experiment", "run_dp_sweep", "baseline_uniform", "baseline_lastlayer",
           "emit_plotdata"]
