"""Quantile regression for clustered data with bootstrap bias adjustment.

Fits cluster-level quantile models in two steps (an asymmetric-Laplace
working model predicts the cluster effects, then standard quantile
regression runs on the shifted responses), bias-adjusts the result with
cluster bootstrap schemes, and ships a Monte Carlo harness plus the
comparison estimators the two-step approach is measured against.
"""

from .bootstrap import (
    SCHEMES,
    BootstrapRun,
    IntervalSet,
    basic_ci,
    bias_adjust,
    draw_weights,
    gen_cw,
    gen_rc,
    gen_rrr,
    gen_rw,
    run_bootstrap,
    se_adjusted_ci,
)
from .data_model import (
    ClusterBlock,
    ClusteredDataset,
    ColumnSchema,
    load_csv,
    write_csv,
)
from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    ParseError,
    QrclustError,
    SchemaError,
    SingularDesignError,
    SolverError,
    UnreliableRunError,
    UnsupportedModelError,
)
from .estimators import (
    JackknifeFit,
    PenalizedFit,
    PenaltySpec,
    TwoStepFit,
    cross_validate_lambda,
    fit_canay,
    fit_marginal,
    fit_oracle,
    fit_penalized,
    fit_twostep,
    jackknife_adjust,
)
from .kernels import BACKEND
from .lqmm import (
    LqmmFit,
    center,
    fit_lqmm,
    gauss_hermite,
    linear_blp,
    marginal_loglik,
    predict_blp,
)
from .qr_core import QrFit, SandwichSE, brute_force_qr, check_loss, fit_qr, standard_errors
from .rng import Stream
from .simulation import (
    CI_TYPES,
    ESTIMATORS,
    ScenarioSpec,
    SimReport,
    gen_dataset,
    marginal_quantile,
    report_render,
    run_scenario,
    true_params,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "SCHEMES",
    "ESTIMATORS",
    "CI_TYPES",
    "Stream",
    "ClusterBlock",
    "ClusteredDataset",
    "ColumnSchema",
    "load_csv",
    "write_csv",
    "QrFit",
    "SandwichSE",
    "check_loss",
    "fit_qr",
    "brute_force_qr",
    "standard_errors",
    "LqmmFit",
    "fit_lqmm",
    "gauss_hermite",
    "marginal_loglik",
    "linear_blp",
    "predict_blp",
    "center",
    "TwoStepFit",
    "PenaltySpec",
    "PenalizedFit",
    "JackknifeFit",
    "fit_oracle",
    "fit_marginal",
    "fit_canay",
    "fit_penalized",
    "cross_validate_lambda",
    "fit_twostep",
    "jackknife_adjust",
    "BootstrapRun",
    "IntervalSet",
    "draw_weights",
    "gen_rw",
    "gen_rrr",
    "gen_rc",
    "gen_cw",
    "run_bootstrap",
    "bias_adjust",
    "basic_ci",
    "se_adjusted_ci",
    "ScenarioSpec",
    "SimReport",
    "true_params",
    "gen_dataset",
    "marginal_quantile",
    "run_scenario",
    "report_render",
    "QrclustError",
    "ConfigError",
    "SchemaError",
    "ParseError",
    "EmptyInputError",
    "DataError",
    "SingularDesignError",
    "SolverError",
    "UnsupportedModelError",
    "UnreliableRunError",
]
