"""Experiment harness: configuration, tuned repeated runs, reports and the CLI."""

from .config import ExperimentConfig
from .experiment import RunFailure, TrialSeries, aggregate, run_experiment
from .reports import emit_reports

__all__ = ["ExperimentConfig", "RunFailure", "TrialSeries", "aggregate", "emit_reports", "run_experiment"]
