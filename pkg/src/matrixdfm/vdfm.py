"""Stacked-vector dynamic factor model as a special case of the engine.

A vector DFM y_t = M f_t + e_t with diagonal error covariance is exactly the
matrix model with one column: k = 1, p2 = 1, B = [1], sigma_c = [1], and the
exact-diagonal idiosyncratic mode. Everything here is a reshaping wrapper;
no separate sampler exists, so the two models stay bit-compatible under a
shared seed by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gibbs import McmcConfig, PosteriorStore, run_chain
from .marglik import MlEstimate, ScanResult, estimate_log_ml, ml_model_scan
from .model import ModelSpec, PriorConfig, default_prior


@dataclass(frozen=True)
class VdfmSpec:
    """Vectorized model: nk series, k_f factors with AR(q) dynamics."""

    nk: int
    k_f: int
    T: int
    q: int = 1
    volatility: str = "none"
    factor_scale: str = "free"

    def to_matrix_spec(self) -> ModelSpec:
        return ModelSpec(n=self.nk, k=1, T=self.T, p1=self.k_f, p2=1, q=self.q,
                         volatility=self.volatility, idio="exact-diagonal",
                         factor_scale=self.factor_scale)

    def validate(self) -> list[str]:
        return self.to_matrix_spec().validate()


def default_vdfm_prior(vspec: VdfmSpec) -> PriorConfig:
    return default_prior(vspec.to_matrix_spec())


def _as_panel(data: np.ndarray) -> np.ndarray:
    """Accept (T, m) or (T, m, 1); return the (T, m, 1) panel view."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        return data[:, :, None]
    if data.ndim == 3 and data.shape[2] == 1:
        return data
    raise ValueError(f"expected (T, m) or (T, m, 1) data, got {data.shape}")


def vdfm_run_chain(vspec: VdfmSpec, prior: PriorConfig, config: McmcConfig,
                   data: np.ndarray) -> PosteriorStore:
    return run_chain(vspec.to_matrix_spec(), prior, config, _as_panel(data))


def vdfm_log_ml(vspec: VdfmSpec, prior: PriorConfig, data: np.ndarray,
                store: PosteriorStore | None = None, n_draws: int = 2000,
                seed: int | None = 0, rng=None, **kw) -> MlEstimate:
    return estimate_log_ml(vspec.to_matrix_spec(), prior, _as_panel(data),
                           store=store, n_draws=n_draws, seed=seed, rng=rng, **kw)


def vdfm_model_scan(data: np.ndarray, k_f_grid, q: int = 1,
                    volatility: str = "none", factor_scale: str = "free",
                    config: McmcConfig | None = None, n_is: int = 2000,
                    seed: int = 0) -> ScanResult:
    """Scan the number of stacked factors; rows come back with p2 = 1."""
    return ml_model_scan(_as_panel(data), [(int(kf), 1) for kf in k_f_grid],
                         volatility=volatility, idio="exact-diagonal", q=q,
                         factor_scale=factor_scale, config=config, n_is=n_is,
                         seed=seed)


def vectorize_panel(Y: np.ndarray) -> np.ndarray:
    """(T, n, k) matrix panel -> (T, n*k) stacked panel, column-major per period."""
    Y = np.asarray(Y, dtype=float)
    T = Y.shape[0]
    return Y.transpose(0, 2, 1).reshape(T, -1)
