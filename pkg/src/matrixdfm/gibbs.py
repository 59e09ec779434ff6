"""Blocked Gibbs sampler for the matrix factor model.

Steps per iteration: (1) loadings A with the row covariance, (2) loadings B
with the column covariance, (3) the factor path, (4) factor innovation
variances, (5) factor AR coefficients by independence MH, (6) the volatility
block for the configured variant. Two idiosyncratic modes share the engine:

* kronecker-cross: Sigma_r drawn marginally from its inverse-Wishart (Sigma_c
  from the restricted one with sigma_c[0,0]=1), then the loadings from the
  constrained conditional matrix normal.
* exact-diagonal: loadings from the same constrained conditional, then the
  diagonal variances from per-series inverse-gamma full conditionals given
  the loadings (sigma_c[0,0] stays pinned at 1).
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _banded
from .distributions import (
    sample_constrained_gaussian,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_restricted_inverse_wishart,
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
    enforce_identification,
    loading_constraint,
    stationary_ok,
    validate_spec,
)
from .volatility import (
    initial_vol_state,
    omega_path,
    residual_scales,
    sample_common_sv,
    sample_fat_tail,
    sample_outliers,
)


class ChainError(RuntimeError):
    """Numerical breakdown inside one sampler step."""

    def __init__(self, step: str, iteration: int, cause: Exception):
        super().__init__(f"step {step!r} failed at iteration {iteration}: {cause}")
        self.step = step
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True)
class McmcConfig:
    burn_in: int = 1000
    draws: int = 2000
    thin: int = 1
    seed: int = 0
    # default is a stacked-model warm start: a cold chain can lock onto the
    # no-factor mode (loadings and factors both near zero) on long panels
    init: str = "vdfm-warm-start"  # prior-draw | vdfm-warm-start | user-supplied
    init_state: object = None
    factor_step: str = "joint"  # "per-t" runs the single-move ablation sampler
    store_factors: bool = True

    def validate(self) -> list[str]:
        out = []
        if self.burn_in < 0:
            out.append("burn_in must be >= 0")
        if self.draws < 1:
            out.append("draws must be >= 1")
        if self.thin < 1:
            out.append("thin must be >= 1")
        if self.init not in ("prior-draw", "vdfm-warm-start", "user-supplied"):
            out.append(f"unknown init mode {self.init!r}")
        if self.factor_step not in ("joint", "per-t"):
            out.append(f"unknown factor_step {self.factor_step!r}")
        return out


def _spd_guard(M: np.ndarray, name: str) -> np.ndarray:
    """Symmetrize and verify SPD; one jitter retry, then hard failure."""
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
        return M
    except np.linalg.LinAlgError:
        jit = 1e-10 * max(1.0, np.trace(M) / M.shape[0])
        M2 = M + jit * np.eye(M.shape[0])
        try:
            np.linalg.cholesky(M2)
            return M2
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"{name} not positive definite after jitter")


# ---------------------------------------------------------------------------
# step 1 / step 2: loadings with their covariances
# ---------------------------------------------------------------------------

def loadings_row_posterior(prior: PriorConfig, Y, B, sigma_c, F, w):
    """Conjugate hyperparameters (K_A, Ahat_T, nu_hat, S_hat) of step 1.

    F is the T x p1 x p2 factor stack, w the per-period 1/omega_t weights.
    Ahat_T is p1 x n (the transpose-space posterior mean).
    """
    V_A_inv = np.linalg.inv(prior.V_A)
    Sc_inv = np.linalg.inv(sigma_c)
    G_c = B.T @ Sc_inv @ B
    K_A = V_A_inv + np.einsum("t,tij,jk,tlk->il", w, F, G_c, F, optimize=True)
    K_A = 0.5 * (K_A + K_A.T)
    M = B.T @ Sc_inv  # p2 x k
    cross = np.einsum("t,tij,jk,tlk->il", w, F, M, Y, optimize=True)  # p1 x n
    rhs = V_A_inv @ prior.A0.T + cross
    Ahat_T = np.linalg.solve(K_A, rhs)
    Tn = Y.shape[0] * Y.shape[2]
    nu_hat = prior.nu_r + Tn
    quad = np.einsum("t,tij,jk,tlk->il", w, Y, Sc_inv, Y, optimize=True)  # n x n
    S_hat = (prior.S_r + prior.A0 @ V_A_inv @ prior.A0.T + quad
             - Ahat_T.T @ K_A @ Ahat_T)
    return K_A, Ahat_T, float(nu_hat), 0.5 * (S_hat + S_hat.T)


def loadings_col_posterior(prior: PriorConfig, Y, A, sigma_r, F, w):
    """Mirror of loadings_row_posterior for step 2; Bhat_T is p2 x k."""
    V_B_inv = np.linalg.inv(prior.V_B)
    Sr_inv = np.linalg.inv(sigma_r)
    G_r = A.T @ Sr_inv @ A
    K_B = V_B_inv + np.einsum("t,tji,jk,tkl->il", w, F, G_r, F, optimize=True)
    K_B = 0.5 * (K_B + K_B.T)
    M = A.T @ Sr_inv  # p1 x n
    cross = np.einsum("t,tji,jk,tkl->il", w, F, M, Y, optimize=True)  # p2 x k
    rhs = V_B_inv @ prior.B0.T + cross
    Bhat_T = np.linalg.solve(K_B, rhs)
    Tn = Y.shape[0] * Y.shape[1]
    nu_hat = prior.nu_c + Tn
    quad = np.einsum("t,tji,jk,tkl->il", w, Y, Sr_inv, Y, optimize=True)  # k x k
    S_hat = (prior.S_c + prior.B0 @ V_B_inv @ prior.B0.T + quad
             - Bhat_T.T @ K_B @ Bhat_T)
    return K_B, Bhat_T, float(nu_hat), 0.5 * (S_hat + S_hat.T)


def _diag_variances_given_loadings(quad_lik, load, load0, V_inv, prior_nu, prior_S,
                                   n_cols_obs, d, rng, fix_first: bool):
    """Per-series IG draws of a diagonal covariance given its loadings.

    quad_lik[i] is the data quadratic for series i, n_cols_obs the number of
    likelihood replicates per series (T*k or T*n), and the prior per series
    is the inverse-Wishart diagonal marginal IG((nu-d+1)/2, S_ii/2).
    """
    p = load.shape[1]
    dev = load - load0
    prior_quad = np.einsum("ij,jk,ik->i", dev, V_inv, dev)
    shape = 0.5 * (prior_nu - d + 1) + 0.5 * (n_cols_obs + p)
    scale = 0.5 * np.diag(prior_S) + 0.5 * (quad_lik + prior_quad)
    out = sample_inverse_gamma(np.full(d, shape), scale, rng, size=d)
    if fix_first:
        out[0] = 1.0
    return np.diag(out)


def step_loadings_row(spec: ModelSpec, prior: PriorConfig, Y, B, sigma_c,
                      F, w, sigma_r, rng):
    """Draw (A, sigma_r). Kronecker mode: Sigma_r marginal IW then A'
    constrained; exact-diagonal mode: A' given Sigma_r, then diagonal IG."""
    K_A, Ahat_T, nu_hat, S_hat = loadings_row_posterior(prior, Y, B, sigma_c, F, w)
    K_A = _spd_guard(K_A, "K_A")
    if spec.idio == "kronecker-cross":
        S_hat = _spd_guard(S_hat, "S_hat_r")
        sigma_r_new = sample_inverse_wishart(nu_hat, S_hat, rng)
    else:
        sigma_r_new = sigma_r  # updated after the loadings draw below
    K_A_inv = np.linalg.inv(K_A)
    K_A_inv = 0.5 * (K_A_inv + K_A_inv.T)
    vecA = sample_constrained_gaussian(
        Ahat_T.reshape(-1, order="F"), sigma_r_new, K_A_inv,
        loading_constraint(spec.n, spec.p1), rng)
    A = vecA.reshape((spec.p1, spec.n), order="F").T
    if spec.idio == "exact-diagonal":
        E = Y - np.einsum("ij,tjk,lk->til", A, F, B)
        Sc_inv = np.linalg.inv(sigma_c)
        quad = np.einsum("t,tij,jk,tik->i", w, E, Sc_inv, E, optimize=True)
        sigma_r_new = _diag_variances_given_loadings(
            quad, A, prior.A0, np.linalg.inv(prior.V_A), prior.nu_r, prior.S_r,
            Y.shape[0] * spec.k, spec.n, rng, fix_first=False)
    return A, sigma_r_new


def step_loadings_col(spec: ModelSpec, prior: PriorConfig, Y, A, sigma_r,
                      F, w, sigma_c, rng):
    """Draw (B, sigma_c); sigma_c keeps its (1,1) element pinned at 1."""
    K_B, Bhat_T, nu_hat, S_hat = loadings_col_posterior(prior, Y, A, sigma_r, F, w)
    K_B = _spd_guard(K_B, "K_B")
    if spec.idio == "kronecker-cross":
        S_hat = _spd_guard(S_hat, "S_hat_c")
        sigma_c_new = sample_restricted_inverse_wishart(nu_hat, S_hat, rng)
    else:
        sigma_c_new = sigma_c
    K_B_inv = np.linalg.inv(K_B)
    K_B_inv = 0.5 * (K_B_inv + K_B_inv.T)
    vecB = sample_constrained_gaussian(
        Bhat_T.reshape(-1, order="F"), sigma_c_new, K_B_inv,
        loading_constraint(spec.k, spec.p2), rng)
    B = vecB.reshape((spec.p2, spec.k), order="F").T
    if spec.idio == "exact-diagonal":
        E = Y - np.einsum("ij,tjk,lk->til", A, F, B)
        Sr_inv = np.linalg.inv(sigma_r)
        quad = np.einsum("t,tji,jk,tki->i", w, E, Sr_inv, E, optimize=True)
        sigma_c_new = _diag_variances_given_loadings(
            quad, B, prior.B0, np.linalg.inv(prior.V_B), prior.nu_c, prior.S_c,
            Y.shape[0] * spec.n, spec.k, rng, fix_first=True)
    return B, sigma_c_new


# ---------------------------------------------------------------------------
# step 3: factor path
# ---------------------------------------------------------------------------

def ar_prior_precision_banded(rho_j: np.ndarray, lam2_j: float, T: int) -> np.ndarray:
    """Banded (q+1, T) precision of one factor series' AR(q) prior.

    Rows t <= q-1 carry the stationary-style initial variance
    lam2/(1 - sum rho^2) exactly as the sampler's prior states it.
    """
    q = len(rho_j)
    diagonals = [np.ones(T)]
    offsets = [0]
    for lag in range(1, q + 1):
        col = np.zeros(T - lag)
        col[max(q - lag, 0):] = -rho_j[lag - 1]
        diagonals.append(col)
        offsets.append(-lag)
    H = sp.diags(diagonals, offsets, format="csc")
    var = np.full(T, lam2_j)
    var[:q] = lam2_j / (1.0 - float(np.sum(rho_j ** 2)))
    P = (H.T @ sp.diags(1.0 / var) @ H).tocsc()
    ab = np.zeros((q + 1, T))
    for dd in range(q + 1):
        ab[dd, : T - dd] = P.diagonal(-dd)
    return ab


def factor_posterior_banded(spec: ModelSpec, loadings: Loadings, idio: IdioCov,
                            dynamics: FactorDynamics, Y, w):
    """Banded precision (lower storage) and rhs of the joint factor path.

    Stacked ordering is t-major: entry t*pf + j is factor j at time t.
    """
    T, pf, q = spec.T, spec.pf, spec.q
    A, B = loadings.A, loadings.B
    Sr_inv = np.linalg.inv(idio.sigma_r)
    Sc_inv = np.linalg.inv(idio.sigma_c)
    G = np.kron(B.T @ Sc_inv @ B, A.T @ Sr_inv @ A)
    G = 0.5 * (G + G.T)
    bw = q * pf
    K_ab = np.zeros((bw + 1, T * pf))
    for j in range(pf):
        abj = ar_prior_precision_banded(dynamics.rho[j], dynamics.lambda2[j], T)
        for dd in range(q + 1):
            K_ab[dd * pf, j::pf][: T - dd] += abj[dd, : T - dd]
    for dd in range(min(pf, bw + 1)):
        gl = np.zeros(pf)
        gl[: pf - dd] = np.diagonal(G, -dd)
        K_ab[dd, :] += (w[:, None] * gl[None, :]).reshape(-1)
    V1 = A.T @ Sr_inv
    V2 = Sc_inv @ B
    M = np.einsum("ij,tjk,kl->til", V1, Y, V2, optimize=True)  # T x p1 x p2
    b = (w[:, None] * M.transpose(0, 2, 1).reshape(T, pf)).reshape(-1)
    return K_ab, b


def step_factors(spec: ModelSpec, loadings: Loadings, idio: IdioCov,
                 dynamics: FactorDynamics, Y, w, rng, mode: str = "joint"):
    """Draw the factor path. "joint" samples f_{1:T} exactly from its full
    conditional through the banded precision; "per-t" is the single-move
    recursion conditioning only on the past draw (ablation mode)."""
    if mode == "per-t":
        return _step_factors_per_t(spec, loadings, idio, dynamics, Y, w, rng)
    K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
    try:
        cb = _banded.chol_banded(K_ab)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"factor path precision not SPD: {e}")
    mean = _banded.solve_banded_spd(cb, b)
    draw = mean + _banded.solve_lt_banded(cb, rng.standard_normal(b.shape[0]))
    return FactorPath(f=draw.reshape(spec.T, spec.pf))


def _step_factors_per_t(spec, loadings, idio, dynamics, Y, w, rng):
    """Literal one-period-at-a-time recursion (omits the t+1 information)."""
    T, pf, q = spec.T, spec.pf, spec.q
    A, B = loadings.A, loadings.B
    Sr_inv = np.linalg.inv(idio.sigma_r)
    Sc_inv = np.linalg.inv(idio.sigma_c)
    G = np.kron(B.T @ Sc_inv @ B, A.T @ Sr_inv @ A)
    lam_inv = 1.0 / dynamics.lambda2
    V1 = A.T @ Sr_inv
    V2 = Sc_inv @ B
    f = np.zeros((T, pf))
    for t in range(T):
        K_t = w[t] * G + np.diag(lam_inv)
        mean_prior = np.zeros(pf)
        for lag in range(1, q + 1):
            if t - lag >= 0:
                mean_prior += dynamics.rho[:, lag - 1] * f[t - lag]
        obs = w[t] * (V1 @ Y[t] @ V2).reshape(-1, order="F")
        cf = sla.cho_factor(K_t, lower=True)
        mu = sla.cho_solve(cf, obs + lam_inv * mean_prior)
        f[t] = mu + sla.solve_triangular(cf[0], rng.standard_normal(pf),
                                         lower=True, trans="T")
    return FactorPath(f=f)


# ---------------------------------------------------------------------------
# step 4 / step 5: factor dynamics
# ---------------------------------------------------------------------------

def step_lambda(spec: ModelSpec, prior: PriorConfig, f: np.ndarray,
                rho: np.ndarray, rng) -> np.ndarray:
    """Innovation variances; the first q points contribute through the
    stationary-form term f_t^2 (1 - sum_m rho_m^2)."""
    if spec.factor_scale == "unit":
        return np.ones(spec.pf)
    T, q = spec.T, spec.q
    lam2 = np.empty(spec.pf)
    for j in range(spec.pf):
        resid = f[q:, j].copy()
        for lag in range(1, q + 1):
            resid -= rho[j, lag - 1] * f[q - lag: T - lag, j]
        head = np.sum(f[:q, j] ** 2) * (1.0 - float(np.sum(rho[j] ** 2)))
        scale = prior.s_lambda + 0.5 * (head + np.sum(resid ** 2))
        lam2[j] = sample_inverse_gamma(prior.nu_lambda + T / 2.0, scale, rng)
    return lam2


def step_rho(spec: ModelSpec, prior: PriorConfig, f: np.ndarray,
             lambda2: np.ndarray, rho: np.ndarray, rng):
    """Independence MH per factor series.

    Proposal is the conditional-likelihood regression posterior restricted
    to the stationary region; the acceptance ratio reduces to the
    stationary initial-condition density ratio of f_{1:q}.
    """
    T, q = spec.T, spec.q
    rho_new = rho.copy()
    accepted = np.zeros(spec.pf, dtype=bool)
    V_inv = 1.0 / prior.v_rho
    for j in range(spec.pf):
        y = f[q:, j]
        X = np.column_stack([f[q - lag: T - lag, j] for lag in range(1, q + 1)])
        lam2_j = lambda2[j]
        K = V_inv * np.eye(q) + X.T @ X / lam2_j
        K = 0.5 * (K + K.T)
        mu = np.linalg.solve(K, V_inv * prior.rho0 * np.ones(q) + X.T @ y / lam2_j)
        L = np.linalg.cholesky(K)
        cand = mu + sla.solve_triangular(L, rng.standard_normal(q),
                                         lower=True, trans="T")
        if not stationary_ok(cand):
            continue
        s_old = float(np.sum(rho[j] ** 2))
        s_new = float(np.sum(cand ** 2))
        head = float(np.sum(f[:q, j] ** 2))
        log_alpha = (0.5 * q * (np.log1p(-s_new) - np.log1p(-s_old))
                     + head / (2.0 * lam2_j) * (s_new - s_old))
        if np.log(rng.random()) < min(0.0, log_alpha):
            rho_new[j] = cand
            accepted[j] = True
    return rho_new, accepted


# ---------------------------------------------------------------------------
# chain driver and posterior storage
# ---------------------------------------------------------------------------

@dataclass
class PosteriorStore:
    """Thinned post-burn-in draws as arrays plus run metadata.

    Arrays are indexed by draw; factor paths are optional (store_factors).
    """

    spec: ModelSpec
    prior: PriorConfig
    config: McmcConfig
    A: np.ndarray
    B: np.ndarray
    sigma_r: np.ndarray
    sigma_c: np.ndarray
    rho: np.ndarray
    lambda2: np.ndarray
    f: np.ndarray | None
    h: np.ndarray | None = None
    phi: np.ndarray | None = None
    sigma_h2: np.ndarray | None = None
    o: np.ndarray | None = None
    p_o: np.ndarray | None = None
    q2: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    acceptance: dict = field(default_factory=dict)
    geweke: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.A.shape[0]

    def state_at(self, i: int) -> ParameterState:
        spec = self.spec
        if spec.volatility == "none":
            vol = VolatilityState.none()
        elif spec.volatility == "common-sv":
            vol = VolatilityState.common_sv(self.h[i], self.phi[i], self.sigma_h2[i])
        elif spec.volatility == "outlier":
            vol = VolatilityState.outlier(self.o[i], self.p_o[i])
        else:
            vol = VolatilityState.fat_tail(self.q2[i], self.prior.df_l)
        return ParameterState(
            loadings=Loadings(A=self.A[i], B=self.B[i]),
            idio=IdioCov(sigma_r=self.sigma_r[i], sigma_c=self.sigma_c[i]),
            dynamics=FactorDynamics(rho=self.rho[i], lambda2=self.lambda2[i]),
            vol=vol)

    def factor_path_at(self, i: int) -> FactorPath | None:
        return None if self.f is None else FactorPath(f=self.f[i])

    def posterior_mean_factors(self) -> np.ndarray:
        if self.f is None:
            raise ValueError("factor paths were not stored")
        return self.f.mean(axis=0)

    # -- persistence: one .npz of arrays plus a JSON manifest ---------------

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = {"A": self.A, "B": self.B, "sigma_r": self.sigma_r,
                  "sigma_c": self.sigma_c, "rho": self.rho, "lambda2": self.lambda2}
        for name in ("f", "h", "phi", "sigma_h2", "o", "p_o", "q2"):
            val = getattr(self, name)
            if val is not None:
                arrays[name] = val
        tmp = out_dir / "arrays.npz.tmp"
        with open(tmp, "wb") as fh:
            np.savez_compressed(fh, **arrays)
        tmp.rename(out_dir / "arrays.npz")
        manifest = {
            "format": "matrixdfm-posterior-v1",
            "spec": _spec_dict(self.spec),
            "prior": _prior_dict(self.prior),
            "config": {"burn_in": self.config.burn_in, "draws": self.config.draws,
                       "thin": self.config.thin, "seed": self.config.seed,
                       "init": self.config.init, "factor_step": self.config.factor_step,
                       "store_factors": self.config.store_factors},
            "build": _build_describe(),
            "timings": self.timings,
            "acceptance": self.acceptance,
            "geweke": self.geweke,
        }
        tmp = out_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.rename(out_dir / "manifest.json")
        return out_dir

    @classmethod
    def load(cls, out_dir) -> "PosteriorStore":
        out_dir = Path(out_dir)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        data = np.load(out_dir / "arrays.npz")
        spec = ModelSpec(**manifest["spec"])
        prior = _prior_from_dict(manifest["prior"])
        config = McmcConfig(**manifest["config"])
        kw = {name: (data[name] if name in data else None)
              for name in ("f", "h", "phi", "sigma_h2", "o", "p_o", "q2")}
        return cls(spec=spec, prior=prior, config=config,
                   A=data["A"], B=data["B"], sigma_r=data["sigma_r"],
                   sigma_c=data["sigma_c"], rho=data["rho"], lambda2=data["lambda2"],
                   timings=manifest.get("timings", {}),
                   acceptance=manifest.get("acceptance", {}),
                   geweke=manifest.get("geweke", {}), **kw)


def _spec_dict(spec: ModelSpec) -> dict:
    return {"n": spec.n, "k": spec.k, "T": spec.T, "p1": spec.p1, "p2": spec.p2,
            "q": spec.q, "volatility": spec.volatility, "idio": spec.idio,
            "factor_scale": spec.factor_scale}


def _prior_dict(prior: PriorConfig) -> dict:
    out = {}
    for name in ("nu_r", "nu_c", "rho0", "v_rho", "nu_lambda", "s_lambda",
                 "phi0", "v_phi", "nu_h", "s_h", "a_po", "b_po", "df_l"):
        out[name] = float(getattr(prior, name))
    for name in ("S_r", "S_c", "A0", "V_A", "B0", "V_B"):
        out[name] = np.asarray(getattr(prior, name)).tolist()
    return out


def _prior_from_dict(d: dict) -> PriorConfig:
    kw = dict(d)
    for name in ("S_r", "S_c", "A0", "V_A", "B0", "V_B"):
        kw[name] = np.asarray(kw[name], dtype=float)
    return PriorConfig(**kw)


def _build_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unreleased"


def initial_chain_state(spec: ModelSpec, prior: PriorConfig, rng):
    """Default initialization: identification projection of small normals,
    zero factors, prior-mean covariances and dynamics."""
    loadings = enforce_identification(0.1 * rng.standard_normal((spec.n, spec.p1)),
                                      0.1 * rng.standard_normal((spec.k, spec.p2)))
    sigma_r = prior.S_r / (prior.nu_r - spec.n - 1.0)
    sigma_c = prior.S_c / (prior.nu_c - spec.k - 1.0)
    sigma_c = sigma_c / sigma_c[0, 0]
    sigma_c[0, 0] = 1.0
    if spec.idio == "exact-diagonal":
        sigma_r = np.diag(np.diag(sigma_r))
        sigma_c = np.diag(np.diag(sigma_c))
        sigma_c[0, 0] = 1.0
    rho0 = np.clip(prior.rho0, -0.95, 0.95)
    rho = np.zeros((spec.pf, spec.q))
    rho[:, 0] = rho0 if spec.q == 1 else rho0 / spec.q
    lam_mean = prior.s_lambda / max(prior.nu_lambda - 1.0, 0.5)
    lambda2 = np.full(spec.pf, 1.0 if spec.factor_scale == "unit" else lam_mean)
    return {
        "loadings": loadings,
        "idio": IdioCov(sigma_r=sigma_r, sigma_c=sigma_c),
        "dynamics": FactorDynamics(rho=rho, lambda2=lambda2),
        "vol": initial_vol_state(spec.volatility, spec.T, prior, rng),
        "f": np.zeros((spec.T, spec.pf)),
    }


def run_chain(spec: ModelSpec, prior: PriorConfig, config: McmcConfig,
              data: np.ndarray) -> PosteriorStore:
    """Run the full sampler and return the thinned posterior store."""
    problems = validate_spec(spec, prior) + config.validate()
    data = np.asarray(data, dtype=float)
    if data.shape != (spec.T, spec.n, spec.k):
        problems.append(f"data shape {data.shape} != {(spec.T, spec.n, spec.k)}")
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))
    rng = np.random.default_rng(config.seed)

    if config.init == "user-supplied":
        if config.init_state is None:
            raise ValueError("init='user-supplied' requires init_state")
        cs = dict(config.init_state)
    elif config.init == "vdfm-warm-start":
        cs = _vdfm_warm_start(spec, prior, data, rng)
    else:
        cs = initial_chain_state(spec, prior, rng)

    n_keep = config.draws
    total = config.burn_in + n_keep * config.thin
    out = {
        "A": np.empty((n_keep, spec.n, spec.p1)),
        "B": np.empty((n_keep, spec.k, spec.p2)),
        "sigma_r": np.empty((n_keep, spec.n, spec.n)),
        "sigma_c": np.empty((n_keep, spec.k, spec.k)),
        "rho": np.empty((n_keep, spec.pf, spec.q)),
        "lambda2": np.empty((n_keep, spec.pf)),
        "f": np.empty((n_keep, spec.T, spec.pf)) if config.store_factors else None,
    }
    vol_out = {}
    if spec.volatility == "common-sv":
        vol_out = {"h": np.empty((n_keep, spec.T)), "phi": np.empty(n_keep),
                   "sigma_h2": np.empty(n_keep)}
    elif spec.volatility == "outlier":
        vol_out = {"o": np.empty((n_keep, spec.T)), "p_o": np.empty(n_keep)}
    elif spec.volatility == "fat-tail":
        vol_out = {"q2": np.empty((n_keep, spec.T))}

    timings = {s: 0.0 for s in ("loadings_row", "loadings_col", "factors",
                                "lambda", "rho", "volatility")}
    acc_rho = np.zeros(spec.pf)
    acc_h = 0.0
    acc_phi = 0.0
    n_iter_done = 0
    kept = 0
    for it in range(total):
        step = "loadings_row"
        try:
            w = 1.0 / omega_path(cs["vol"], spec.T)
            F = cs["f"].reshape((spec.T, spec.p2, spec.p1)).swapaxes(1, 2)

            t0 = time.perf_counter()
            A, sigma_r = step_loadings_row(spec, prior, data, cs["loadings"].B,
                                           cs["idio"].sigma_c, F, w,
                                           cs["idio"].sigma_r, rng)
            timings["loadings_row"] += time.perf_counter() - t0

            step = "loadings_col"
            t0 = time.perf_counter()
            B, sigma_c = step_loadings_col(spec, prior, data, A, sigma_r, F, w,
                                           cs["idio"].sigma_c, rng)
            timings["loadings_col"] += time.perf_counter() - t0
            loadings = enforce_identification(A, B)
            idio = IdioCov(sigma_r=sigma_r, sigma_c=sigma_c)

            step = "factors"
            t0 = time.perf_counter()
            fpath = step_factors(spec, loadings, idio, cs["dynamics"], data, w,
                                 rng, mode=config.factor_step)
            timings["factors"] += time.perf_counter() - t0

            step = "lambda"
            t0 = time.perf_counter()
            lambda2 = step_lambda(spec, prior, fpath.f, cs["dynamics"].rho, rng)
            timings["lambda"] += time.perf_counter() - t0

            step = "rho"
            t0 = time.perf_counter()
            rho, acc = step_rho(spec, prior, fpath.f, lambda2,
                                cs["dynamics"].rho, rng)
            acc_rho += acc
            timings["rho"] += time.perf_counter() - t0
            dynamics = FactorDynamics(rho=rho, lambda2=lambda2)

            step = "volatility"
            t0 = time.perf_counter()
            vol = cs["vol"]
            if spec.volatility != "none":
                s2 = residual_scales(data, loadings, fpath.f,
                                     idio.sigma_r, idio.sigma_c)
                if spec.volatility == "common-sv":
                    vol, info = sample_common_sv(vol, s2, spec.n * spec.k, prior, rng)
                    acc_h += info["h_accepted"]
                    acc_phi += info["phi_accepted"]
                elif spec.volatility == "outlier":
                    vol, _ = sample_outliers(vol, s2, spec.n * spec.k, prior, rng)
                else:
                    vol = sample_fat_tail(vol, s2, spec.n * spec.k, rng)
            timings["volatility"] += time.perf_counter() - t0
        except np.linalg.LinAlgError as e:
            raise ChainError(step, it, e)

        cs.update(loadings=loadings, idio=idio, dynamics=dynamics,
                  vol=vol, f=fpath.f)
        n_iter_done += 1

        past_burn = it - config.burn_in
        if past_burn >= 0 and (past_burn + 1) % config.thin == 0:
            out["A"][kept] = loadings.A
            out["B"][kept] = loadings.B
            out["sigma_r"][kept] = idio.sigma_r
            out["sigma_c"][kept] = idio.sigma_c
            out["rho"][kept] = dynamics.rho
            out["lambda2"][kept] = dynamics.lambda2
            if out["f"] is not None:
                out["f"][kept] = fpath.f
            if spec.volatility == "common-sv":
                vol_out["h"][kept] = vol.h
                vol_out["phi"][kept] = vol.phi
                vol_out["sigma_h2"][kept] = vol.sigma_h2
            elif spec.volatility == "outlier":
                vol_out["o"][kept] = vol.o
                vol_out["p_o"][kept] = vol.p_o
            elif spec.volatility == "fat-tail":
                vol_out["q2"][kept] = vol.q2
            kept += 1

    acceptance = {"rho": (acc_rho / max(n_iter_done, 1)).tolist()}
    if spec.volatility == "common-sv":
        acceptance["h"] = acc_h / max(n_iter_done, 1)
        acceptance["phi"] = acc_phi / max(n_iter_done, 1)
    store = PosteriorStore(spec=spec, prior=prior, config=config,
                           A=out["A"], B=out["B"], sigma_r=out["sigma_r"],
                           sigma_c=out["sigma_c"], rho=out["rho"],
                           lambda2=out["lambda2"], f=out["f"],
                           timings=timings, acceptance=acceptance, **vol_out)
    store.geweke = geweke_table(store)
    return store


def _vdfm_warm_start(spec: ModelSpec, prior: PriorConfig, data, rng):
    """Initialize near the mode: factors from a short stacked-model run,
    then full bilinear alternating least squares (loadings and factors),
    an exact identification transform, and moment-matched covariances and
    dynamics. A cold start can take thousands of sweeps to crawl out of
    the no-factor mode on long panels; this cuts the burn-in to hundreds."""
    from .vdfm import VdfmSpec, default_vdfm_prior, vdfm_run_chain, vectorize_panel

    T, n, k, p1, p2, pf = spec.T, spec.n, spec.k, spec.p1, spec.p2, spec.pf
    vspec = VdfmSpec(nk=n * k, k_f=pf, T=T, q=spec.q, volatility="none")
    vprior = default_vdfm_prior(vspec)
    cfg = McmcConfig(burn_in=100, draws=100, seed=int(rng.integers(2 ** 31)),
                     init="prior-draw")
    warm = vdfm_run_chain(vspec, vprior, cfg, vectorize_panel(data))
    cs = initial_chain_state(spec, prior, rng)
    f = warm.posterior_mean_factors()
    F = f.reshape((T, p2, p1)).swapaxes(1, 2)
    B = cs["loadings"].B
    A = cs["loadings"].A
    sse_prev = np.inf
    for _ in range(25):
        design = np.einsum("tij,lj->tli", F, B).reshape(-1, p1)
        resp = data.transpose(0, 2, 1).reshape(-1, n)
        A = np.linalg.lstsq(design, resp, rcond=None)[0].T
        design = np.einsum("im,tmj->tij", A, F).reshape(-1, p2)
        resp = data.reshape(-1, k)
        B = np.linalg.lstsq(design, resp, rcond=None)[0].T
        PA = np.linalg.pinv(A.T @ A) @ A.T
        PB = B @ np.linalg.pinv(B.T @ B)
        F = np.einsum("ij,tjk,kl->til", PA, data, PB)
        E = data - np.einsum("ij,tjk,lk->til", A, F, B)
        sse = float(np.sum(E * E))
        if sse_prev - sse < 1e-9 * max(sse, 1.0):
            break
        sse_prev = sse
    # map the fit onto the identified set without changing A F B'
    GA, GB = A[:p1, :p1], B[:p2, :p2]
    if (abs(np.linalg.det(GA)) > 1e-10 * np.linalg.norm(A) ** p1
            and abs(np.linalg.det(GB)) > 1e-10 * np.linalg.norm(B) ** p2):
        A = A @ np.linalg.inv(GA)
        B = B @ np.linalg.inv(GB)
        F = np.einsum("ij,tjk,lk->til", GA, F, GB)
    cs["loadings"] = enforce_identification(A, B)
    cs["f"] = F.transpose(0, 2, 1).reshape(T, pf)

    # dynamics: per-series AR fit on the warm factor paths
    q = spec.q
    fw = cs["f"]
    rho = np.zeros((pf, q))
    lam2 = np.ones(pf)
    for j in range(pf):
        y = fw[q:, j]
        X = np.column_stack([fw[q - l: T - l, j] for l in range(1, q + 1)])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        coef *= min(1.0, 0.98 / max(np.sqrt(np.sum(coef ** 2)), 1e-12))
        if not stationary_ok(coef):
            coef = np.full(q, 0.5 / q)
        rho[j] = coef
        resid = y - X @ coef
        lam2[j] = max(float(resid @ resid / max(y.size, 1)), 1e-8)
    if spec.factor_scale == "unit":
        lam2 = np.ones(pf)
    cs["dynamics"] = FactorDynamics(rho=rho, lambda2=lam2)

    # covariances: moment estimates from the bilinear residuals
    E = data - np.einsum("ij,tjk,lk->til", cs["loadings"].A, F, cs["loadings"].B)
    sigma_c = np.einsum("tij,til->jl", E, E) / (T * n)
    sigma_c += 1e-6 * np.mean(np.diag(sigma_c)) * np.eye(k)
    gamma = sigma_c[0, 0]
    sigma_c /= gamma
    sigma_c[0, 0] = 1.0
    Sc_inv = np.linalg.inv(sigma_c)
    sigma_r = np.einsum("tij,jk,tlk->il", E, Sc_inv, E) / (T * k)
    sigma_r += 1e-6 * np.mean(np.diag(sigma_r)) * np.eye(n)
    if spec.idio == "exact-diagonal":
        sigma_r = np.diag(np.diag(sigma_r))
        sigma_c = np.diag(np.diag(sigma_c))
    cs["idio"] = IdioCov(sigma_r=sigma_r, sigma_c=sigma_c)
    return cs


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

def _long_run_variance(x: np.ndarray) -> float:
    """Newey-West spectral variance at frequency zero (Bartlett kernel)."""
    x = x - x.mean()
    n = len(x)
    if n < 8:
        return float(x @ x / max(n, 1))
    L = max(1, int(4 * (n / 100.0) ** (2.0 / 9.0)))
    s = x @ x / n
    for lag in range(1, L + 1):
        wgt = 1.0 - lag / (L + 1.0)
        s += 2.0 * wgt * (x[:-lag] @ x[lag:]) / n
    return float(max(s, 1e-300))


def geweke_z(x: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke convergence z-score between early and late chain segments."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    a = x[: max(int(first * n), 2)]
    b = x[-max(int(last * n), 2):]
    var = _long_run_variance(a) / len(a) + _long_run_variance(b) / len(b)
    if var <= 0:
        return 0.0
    return float((a.mean() - b.mean()) / np.sqrt(var))


def geweke_table(store: PosteriorStore) -> dict:
    """z-score per scalar parameter of the chain."""
    spec = store.spec
    out = {}
    from .model import free_loading_mask

    for name, arr, p in (("A", store.A, spec.p1), ("B", store.B, spec.p2)):
        mask = free_loading_mask(arr.shape[1], p)
        for i, j in zip(*np.nonzero(mask)):
            out[f"{name}[{i},{j}]"] = geweke_z(arr[:, i, j])
    if spec.idio == "kronecker-cross":
        for i in range(spec.n):
            for j in range(i + 1):
                out[f"sigma_r[{i},{j}]"] = geweke_z(store.sigma_r[:, i, j])
        for i in range(spec.k):
            for j in range(i + 1):
                if i == 0 and j == 0:
                    continue
                out[f"sigma_c[{i},{j}]"] = geweke_z(store.sigma_c[:, i, j])
    else:
        for i in range(spec.n):
            out[f"sigma_r[{i},{i}]"] = geweke_z(store.sigma_r[:, i, i])
        for i in range(1, spec.k):
            out[f"sigma_c[{i},{i}]"] = geweke_z(store.sigma_c[:, i, i])
    for j in range(spec.pf):
        for lag in range(spec.q):
            out[f"rho[{j},{lag}]"] = geweke_z(store.rho[:, j, lag])
        if spec.factor_scale == "free":
            out[f"lambda2[{j}]"] = geweke_z(store.lambda2[:, j])
    if spec.volatility == "common-sv":
        out["phi"] = geweke_z(store.phi)
        out["sigma_h2"] = geweke_z(store.sigma_h2)
    elif spec.volatility == "outlier":
        out["p_o"] = geweke_z(store.p_o)
    return out
