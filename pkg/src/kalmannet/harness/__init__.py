"""Experiment harness: configuration, reports, experiment drivers and the CLI."""
from kalmannet.harness.config import ExperimentConfig, default_config, load_config, parse_config
from kalmannet.harness.experiments import (
    run_convergence,
    run_generalization,
    run_lorenz,
    run_mse_curve,
    run_online,
)
from kalmannet.harness.gradcheck import check_gradients, gradcheck_suite
from kalmannet.harness.report import Check, ExperimentResult, MetricReport, MetricRow

__all__ = [
    "ExperimentConfig", "default_config", "load_config", "parse_config",
    "run_mse_curve", "run_generalization", "run_convergence", "run_lorenz", "run_online",
    "check_gradients", "gradcheck_suite",
    "MetricReport", "MetricRow", "Check", "ExperimentResult",
]
