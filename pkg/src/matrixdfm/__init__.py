"""Bayesian dynamic factor models for matrix-valued time series.

A T-long panel of n x k matrices Y_t is driven bilinearly by a low-dimensional
latent factor matrix, Y_t = A F_t B' + E_t, with Kronecker-structured (or
diagonal) idiosyncratic covariance and optional time-varying volatility.
The package provides the constrained Gibbs sampler, importance-sampling
marginal likelihoods for model comparison, the stacked-panel baseline model,
simulation studies, and a CLI.
"""

from .dataio import DataError, PanelDataset, ingest_csv, preprocess, serialize_dataset
from .gibbs import ChainError, McmcConfig, PosteriorStore, geweke_table, run_chain
from .marglik import (
    CandidateResult,
    ImportanceDensity,
    MlEstimate,
    ScanResult,
    estimate_log_ml,
    fit_importance_density,
    format_scan_table,
    importance_sample_log_ml,
    integrated_loglik,
    ml_from_log_weights,
    ml_model_scan,
)
from .model import (
    FactorDynamics,
    FactorPath,
    IdioCov,
    Loadings,
    ModelSpec,
    ParameterState,
    PriorConfig,
    VolatilityState,
    common_component,
    default_prior,
    enforce_identification,
    unvec,
    vec,
)
from .simulate import (
    DgpConfig,
    adjusted_r2,
    generate_mdfm,
    generate_vdfm,
    matricize_panel,
    run_experiment,
)
from .vdfm import (
    VdfmSpec,
    default_vdfm_prior,
    vdfm_log_ml,
    vdfm_model_scan,
    vdfm_run_chain,
    vectorize_panel,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateResult",
    "ChainError",
    "DataError",
    "DgpConfig",
    "FactorDynamics",
    "FactorPath",
    "IdioCov",
    "ImportanceDensity",
    "Loadings",
    "McmcConfig",
    "MlEstimate",
    "ModelSpec",
    "PanelDataset",
    "ParameterState",
    "PosteriorStore",
    "PriorConfig",
    "ScanResult",
    "VdfmSpec",
    "VolatilityState",
    "adjusted_r2",
    "common_component",
    "default_prior",
    "default_vdfm_prior",
    "enforce_identification",
    "estimate_log_ml",
    "fit_importance_density",
    "format_scan_table",
    "generate_mdfm",
    "generate_vdfm",
    "geweke_table",
    "importance_sample_log_ml",
    "ingest_csv",
    "integrated_loglik",
    "ml_from_log_weights",
    "ml_model_scan",
    "preprocess",
    "run_chain",
    "run_experiment",
    "serialize_dataset",
    "unvec",
    "vec",
    "vdfm_log_ml",
    "vdfm_model_scan",
    "vdfm_run_chain",
    "matricize_panel",
    "vectorize_panel",
]
