"""Sparse and smooth Bayesian linear regression with the LS-APC prior.

Gibbs and variational Bayes inference, Chib marginal likelihoods for
selecting a correlated-noise model, a fused-lasso baseline and a simulation
harness for comparing them.
"""
from .errors import (
    ConditioningError, ConfigError, DataError, DimensionError, EstimationError,
    InvalidParameterError, LsapcError, NotPositiveDefiniteError, NumericalError,
)
from .model import Dataset, LsapcConfig, ModelState, PointEstimate, log_joint
from .gibbs import (
    GibbsChain, GibbsSettings, ThetaStarRule, chib_decomposition, chib_log_marginal,
    map_point_estimate, run_chain,
)
from .vb import VbPosterior, elbo, run_vb, vb_model_weight, vb_point_estimate
from .covariance import DEFAULT_XI_GRID, SelectionTable, build_B, grid_select, whiten
from .fused_lasso import FlConfig, cross_validate, fit_fused_lasso, tv_prox
from .simulation import (
    GroundTruthSpec, Method, Shape, StudyConfig, StudyResult, absolute_error,
    make_ground_truth, run_study, simulate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "ConditioningError", "ConfigError", "DataError", "DimensionError", "EstimationError",
    "InvalidParameterError", "LsapcError", "NotPositiveDefiniteError", "NumericalError",
    "Dataset", "LsapcConfig", "ModelState", "PointEstimate", "log_joint",
    "GibbsChain", "GibbsSettings", "ThetaStarRule", "chib_decomposition", "chib_log_marginal",
    "map_point_estimate", "run_chain",
    "VbPosterior", "elbo", "run_vb", "vb_model_weight", "vb_point_estimate",
    "DEFAULT_XI_GRID", "SelectionTable", "build_B", "grid_select", "whiten",
    "FlConfig", "cross_validate", "fit_fused_lasso", "tv_prox",
    "GroundTruthSpec", "Method", "Shape", "StudyConfig", "StudyResult", "absolute_error",
    "make_ground_truth", "run_study", "simulate_dataset",
]
