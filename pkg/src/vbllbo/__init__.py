"""Bayesian optimization with variational Bayesian last-layer surrogates."""

from .acquisition import (
    GlmSample,
    NsgaConfig,
    ParetoArchive,
    hypervolume,
    log_ei,
    nsga2_optimize,
    optimize_acqf_ei,
    optimize_ts_single,
    select_hvi_candidate,
    thompson_sample,
)
from .benchmarks import Problem, SobolStream, initial_design, list_problems, make_problem
from .harness import ExperimentConfig, RunRecord, export_curves, run_experiment, sweep
from .head import VbllHead, elbo_loss, fit_last_layer_exact, predictive, recursive_update
from .trainer import Dataset, ReinitPolicy, SurrogateModel, TrainConfig, bo_step, condition_on, train_full

__version__ = "0.1.0"
