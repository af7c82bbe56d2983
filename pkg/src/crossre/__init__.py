"""Balanced two-way crossed random effects: fitting, prediction, intervals.

The package fits y = mean(x) + row effect + column effect
(+ interaction) + error on a complete g x h grid with m observations
per cell, by REML or ML, using the closed-form eigenstructure of the
marginal covariance. It predicts the random effects (EBLUPs), attaches
prediction MSEs by three estimators, builds asymptotic prediction
intervals, and ships a Monte Carlo harness that checks their coverage.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConvergenceError,
    CrossreError,
    DataError,
    NumericError,
    RankDeficiencyError,
    ResourceError,
)
from .layout import BalancedLayout, ResponseTable, averages
from .kron import (
    VarianceComponents,
    LambdaSpectrum,
    apply_v,
    apply_v_inv,
    lambdas,
    logdet_v,
    project_strata,
)
from .design import (
    CenteredDesign,
    CovariateRoles,
    build_centered_design,
    decompose_cell_covariate,
    leverage,
    leverage_matrix,
)
from .estimate import (
    FitResult,
    FixedEffects,
    fit,
    fixed_effects_covariance,
    gls_fixed_effects,
    linear_approx_parameter_errors,
    ml_criterion,
    reml_criterion,
)
from .predict import (
    Eblups,
    blup_interaction,
    blup_no_interaction,
    cell_effect,
    eblup,
)
from .uncertainty import (
    JointCovariance,
    MseEstimate,
    PredictionInterval,
    info_matrix_B,
    joint_covariance,
    mse_bundle,
    mse_kh,
    mse_lsw,
    mse_lsw_all,
    mse_pr,
    prediction_interval,
)
from .simlab import (
    MixtureSpec,
    ScenarioConfig,
    ScenarioResult,
    emit_table,
    gen_covariate,
    gen_effects,
    gen_response,
    run_scenario,
)
from .io import IngestResult, ingest_csv, write_long_csv
from .model import CrossedRandomEffects

__all__ = [
    "__version__",
    "CrossreError", "DataError", "ConfigError", "NumericError",
    "RankDeficiencyError", "ConvergenceError", "ResourceError",
    "BalancedLayout", "ResponseTable", "averages",
    "VarianceComponents", "LambdaSpectrum", "lambdas",
    "apply_v", "apply_v_inv", "logdet_v", "project_strata",
    "CovariateRoles", "CenteredDesign", "build_centered_design",
    "decompose_cell_covariate", "leverage", "leverage_matrix",
    "FixedEffects", "FitResult", "fit", "gls_fixed_effects",
    "fixed_effects_covariance", "reml_criterion", "ml_criterion",
    "linear_approx_parameter_errors",
    "Eblups", "blup_interaction", "blup_no_interaction", "eblup",
    "cell_effect",
    "MseEstimate", "JointCovariance", "PredictionInterval",
    "mse_lsw", "mse_lsw_all", "mse_kh", "mse_pr", "mse_bundle",
    "info_matrix_B", "joint_covariance", "prediction_interval",
    "MixtureSpec", "ScenarioConfig", "ScenarioResult",
    "gen_covariate", "gen_effects", "gen_response", "run_scenario",
    "emit_table",
    "IngestResult", "ingest_csv", "write_long_csv",
    "CrossedRandomEffects",
]
