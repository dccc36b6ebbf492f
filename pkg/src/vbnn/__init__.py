"""Variational Bayesian neural networks with stochastically gated ReLU
relaxations and global-local shrinkage priors."""

__version__ = "0.1.0"

from .cavi import CaviOptions, NumericalAbort, elbo, fit_cavi
from .data import MetricsReport, load_dataset, metrics, simulate_toy, split
from .distributions import (
    GigMoments,
    GigParams,
    InvGammaParams,
    gig_moments,
    log_bessel_k,
    pg_mean,
    sample_inv_gamma,
    sample_mvn,
)
from .ensemble import EnsembleModel, ensemble_predict, ensemble_weights, fit_ensemble
from .predict import PredictiveSummary, predict, predictive_local_fit, predictive_moments, sample_predictive, sparse_predict
from .sparsify import SparseMask, fdr_estimate, select_nodes, weight_score
from .state import (
    Dataset,
    FitResult,
    GlobalVariational,
    LocalVariational,
    NetworkConfig,
    activation_moments,
    initialize,
    load_model,
    save_model,
    scale_hyperparameters,
)
from .svi import SviOptions, fit_svi, learning_rate, svi_step

__all__ = [
    "CaviOptions",
    "Dataset",
    "EnsembleModel",
    "FitResult",
    "GigMoments",
    "GigParams",
    "GlobalVariational",
    "InvGammaParams",
    "LocalVariational",
    "MetricsReport",
    "NetworkConfig",
    "NumericalAbort",
    "PredictiveSummary",
    "SparseMask",
    "SviOptions",
    "activation_moments",
    "elbo",
    "ensemble_predict",
    "ensemble_weights",
    "fdr_estimate",
    "fit_cavi",
    "fit_ensemble",
    "fit_svi",
    "gig_moments",
    "initialize",
    "learning_rate",
    "load_dataset",
    "load_model",
    "log_bessel_k",
    "metrics",
    "pg_mean",
    "predict",
    "predictive_local_fit",
    "predictive_moments",
    "sample_inv_gamma",
    "sample_mvn",
    "sample_predictive",
    "save_model",
    "scale_hyperparameters",
    "select_nodes",
    "simulate_toy",
    "sparse_predict",
    "split",
    "svi_step",
    "weight_score",
]
