"""Per-period error-scale updates: common stochastic volatility, discrete
outlier scales, and fat-tailed (inverse-gamma mixture) innovations.

Everything here conditions on the T-vector of residual scale statistics

    s2_t = tr[Sigma_c^{-1} E_t' Sigma_r^{-1} E_t],  E_t = Y_t - A F_t B',

which is the only way the data enter any omega_t update. omega_t scales the
idiosyncratic error covariance only, never the factor innovations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _banded
from .distributions import sample_inverse_gamma, sample_truncated_normal
from .model import Loadings, PriorConfig, VolatilityState


@dataclass(frozen=True)
class OutlierGrid:
    """Discrete support for the outlier scale; first point is the regular regime."""

    support: np.ndarray = field(default_factory=lambda: np.arange(1, 21, dtype=float))

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        if s[0] != 1.0:
            raise ValueError("grid must start at the regular regime o=1")
        if np.any(np.diff(s) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "support", s)

    def log_prior(self, p_o: float) -> np.ndarray:
        """log P(o); regular point gets 1-p_o, the rest share p_o uniformly."""
        g = len(self.support)
        out = np.full(g, np.log(p_o / (g - 1)))
        out[0] = np.log1p(-p_o)
        return out


DEFAULT_GRID = OutlierGrid()


def omega_of(vol: VolatilityState, t: int) -> float:
    """Error-scale omega_t for one period; 1 under variant none."""
    if vol.variant == "none":
        return 1.0
    if vol.variant == "common-sv":
        return float(np.exp(vol.h[t]))
    if vol.variant == "outlier":
        return float(vol.o[t] ** 2)
    if vol.variant == "fat-tail":
        return float(vol.q2[t])
    raise ValueError(f"unknown variant {vol.variant!r}")


def omega_path(vol: VolatilityState, T: int) -> np.ndarray:
    """The full omega_{1:T} vector."""
    if vol.variant == "none":
        return np.ones(T)
    if vol.variant == "common-sv":
        return np.exp(vol.h)
    if vol.variant == "outlier":
        return vol.o ** 2
    if vol.variant == "fat-tail":
        return vol.q2.copy()
    raise ValueError(f"unknown variant {vol.variant!r}")


def residual_scales(Y: np.ndarray, loadings: Loadings, f: np.ndarray,
                    sigma_r: np.ndarray, sigma_c: np.ndarray) -> np.ndarray:
    """s2_t = tr[Sigma_c^{-1} E_t' Sigma_r^{-1} E_t] for all t at once."""
    A, B = loadings.A, loadings.B
    p1, p2 = A.shape[1], B.shape[1]
    T = Y.shape[0]
    F = f.reshape((T, p2, p1)).swapaxes(1, 2)
    E = Y - np.einsum("ij,tjk,lk->til", A, F, B)
    Sr_inv = _spd_inv(sigma_r)
    Sc_inv = _spd_inv(sigma_c)
    RE = np.einsum("ij,tjk->tik", Sr_inv, E)
    EC = np.einsum("tij,jk->tik", E, Sc_inv)
    return np.einsum("tik,tik->t", RE, EC)


def _spd_inv(a: np.ndarray) -> np.ndarray:
    cf = sla.cho_factor(0.5 * (a + a.T), lower=True)
    inv = sla.cho_solve(cf, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


# ---------------------------------------------------------------------------
# common stochastic volatility
# ---------------------------------------------------------------------------

def _sv_prior_precision_banded(T: int, phi: float, sigma_h2: float) -> np.ndarray:
    """Tridiagonal H_phi' Sigma_h^{-1} H_phi in lower banded storage.

    Sigma_h = diag(sigma_h2/(1-phi^2), sigma_h2, ..., sigma_h2) so the
    stationary AR(1) initial condition is built in.
    """
    d = np.full(T, 1.0 / sigma_h2)
    d[0] = (1.0 - phi ** 2) / sigma_h2
    ab = np.zeros((2, T))
    ab[0, :] = d
    ab[0, :-1] += phi ** 2 / sigma_h2
    ab[1, :-1] = -phi / sigma_h2
    return ab


def sv_log_target(h: np.ndarray, s2: np.ndarray, nk: int, prior_ab: np.ndarray) -> float:
    """Unnormalized log p(h | s2, phi, sigma_h2), prior quadratic included."""
    quad = _banded_quad(prior_ab, h)
    return float(-0.5 * quad - 0.5 * nk * h.sum() - 0.5 * np.sum(s2 * np.exp(-h)))


def _banded_quad(ab: np.ndarray, x: np.ndarray) -> float:
    d = ab[0]
    off = ab[1, :-1]
    return float(np.sum(d * x * x) + 2.0 * np.sum(off * x[:-1] * x[1:]))


def sv_mode(h0: np.ndarray, s2: np.ndarray, nk: int, prior_ab: np.ndarray,
            max_iter: int = 5, tol: float = 1e-8):
    """Newton mode of the h full conditional; returns (h_hat, K_banded, ok).

    The target is strictly concave, so undamped Newton converges; the
    iteration cap is part of the step contract and non-convergence is
    reported, not raised.
    """
    h = h0.copy()
    K = None
    for _ in range(max_iter):
        w = 0.5 * s2 * np.exp(-h)
        grad = -_banded_mv(prior_ab, h) - 0.5 * nk + w
        K = prior_ab.copy()
        K[0] += w
        cb = _banded.chol_banded(K)
        h = h + _banded.solve_banded_spd(cb, grad)
        if np.max(np.abs(grad)) < tol:
            break
    w = 0.5 * s2 * np.exp(-h)
    grad = -_banded_mv(prior_ab, h) - 0.5 * nk + w
    K = prior_ab.copy()
    K[0] += w
    return h, K, bool(np.max(np.abs(grad)) < tol)


def _banded_mv(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = ab[0] * x
    y[:-1] += ab[1, :-1] * x[1:]
    y[1:] += ab[1, :-1] * x[:-1]
    return y


def sample_common_sv(vol: VolatilityState, s2: np.ndarray, nk: int,
                     prior: PriorConfig, rng, ar_cap: int = 1000):
    """One sweep of the common-SV block: h by ARMH, then phi, then sigma_h2.

    Returns (new VolatilityState, info dict). Newton non-convergence from
    both the current path and a crude elementwise restart keeps the previous
    h and records a rejection.
    """
    T = s2.shape[0]
    h, phi, sigma_h2 = vol.h, vol.phi, vol.sigma_h2
    info = {"h_accepted": False, "h_newton_failed": False,
            "phi_accepted": False, "ar_tries": 0}

    prior_ab = _sv_prior_precision_banded(T, phi, sigma_h2)
    h_hat, K, ok = sv_mode(h, s2, nk, prior_ab)
    if not ok:
        restart = np.log(np.clip(s2 / max(nk, 1), 1e-8, 1e8))
        h_hat, K, ok = sv_mode(restart, s2, nk, prior_ab)
    if not ok:
        info["h_newton_failed"] = True
        h_new = h
    else:
        cb = _banded.chol_banded(K)
        half_logdet = 0.5 * _banded.logdet_from_chol(cb)

        def log_q(x):
            d = x - h_hat
            return float(half_logdet - 0.5 * _banded_quad(K, d))

        def log_p(x):
            return sv_log_target(x, s2, nk, prior_ab)

        log_c = log_p(h_hat) - log_q(h_hat)
        # acceptance-rejection step against c * q
        z = None
        for i in range(ar_cap):
            cand = _banded.draw_gaussian_prec_banded(h_hat, cb, rng)
            if np.log(rng.random()) < min(0.0, log_p(cand) - log_c - log_q(cand)):
                z = cand
                info["ar_tries"] = i + 1
                break
        if z is None:
            h_new = h
        else:
            # MH correction: proposal density after AR is min(q(z), p(z)/c)
            num = log_p(z) + min(log_q(h), log_p(h) - log_c)
            den = log_p(h) + min(log_q(z), log_p(z) - log_c)
            if np.log(rng.random()) < min(0.0, num - den):
                h_new = z
                info["h_accepted"] = True
            else:
                h_new = h

    phi_new, phi_acc = _sample_sv_phi(h_new, phi, sigma_h2, prior, rng)
    info["phi_accepted"] = phi_acc
    sigma_h2_new = _sample_sv_var(h_new, phi_new, prior, rng)
    return VolatilityState.common_sv(h_new, phi_new, sigma_h2_new), info


def _sample_sv_phi(h: np.ndarray, phi: float, sigma_h2: float,
                   prior: PriorConfig, rng) -> tuple[float, bool]:
    """Truncated-normal proposal from the t>=2 regression, MH-corrected for
    the stationary initial condition of h_1."""
    hl, hc = h[:-1], h[1:]
    K = 1.0 / prior.v_phi + hl @ hl / sigma_h2
    mu = (prior.phi0 / prior.v_phi + hl @ hc / sigma_h2) / K
    cand = sample_truncated_normal(mu, 1.0 / K, -1.0, 1.0, rng)

    def init_ll(p):
        return 0.5 * np.log1p(-p ** 2) - h[0] ** 2 * (1.0 - p ** 2) / (2.0 * sigma_h2)

    if np.log(rng.random()) < min(0.0, init_ll(cand) - init_ll(phi)):
        return float(cand), True
    return float(phi), False


def _sample_sv_var(h: np.ndarray, phi: float, prior: PriorConfig, rng) -> float:
    T = h.shape[0]
    rss = h[0] ** 2 * (1.0 - phi ** 2) + np.sum((h[1:] - phi * h[:-1]) ** 2)
    return sample_inverse_gamma(prior.nu_h + T / 2.0, prior.s_h + 0.5 * rss, rng)


# ---------------------------------------------------------------------------
# outliers and fat tails
# ---------------------------------------------------------------------------

def sample_outliers(vol: VolatilityState, s2: np.ndarray, nk: int,
                    prior: PriorConfig, rng, grid: OutlierGrid = DEFAULT_GRID):
    """Per-period grid draw of o_t by inverse transform, then p_o | o Beta."""
    T = s2.shape[0]
    o_vals = grid.support
    # log-likelihood of each grid point: N(0, o^2 * ...) scale factor only
    loglik = (-0.5 * nk * np.log(o_vals ** 2)[None, :]
              - s2[:, None] / (2.0 * o_vals[None, :] ** 2))
    logpost = loglik + grid.log_prior(vol.p_o)[None, :]
    logpost -= logpost.max(axis=1, keepdims=True)
    probs = np.exp(logpost)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(T)
    idx = (u[:, None] > cum).sum(axis=1)
    o_new = o_vals[idx]
    n1 = int(np.sum(o_new == 1.0))
    p_o_new = rng.beta(prior.a_po + (T - n1), prior.b_po + n1)
    return VolatilityState.outlier(o_new, p_o_new), probs


def sample_fat_tail(vol: VolatilityState, s2: np.ndarray, nk: int, rng) -> VolatilityState:
    """q2_t ~ IG((nk + l)/2, (s2_t + l)/2) independently per period."""
    df = vol.df
    q2 = sample_inverse_gamma((nk + df) / 2.0, (s2 + df) / 2.0, rng, size=s2.shape[0])
    return VolatilityState.fat_tail(q2, df)


def initial_vol_state(variant: str, T: int, prior: PriorConfig, rng) -> VolatilityState:
    """Prior-ish starting state for each variant."""
    if variant == "none":
        return VolatilityState.none()
    if variant == "common-sv":
        return VolatilityState.common_sv(np.zeros(T), prior.phi0,
                                         prior.s_h / (prior.nu_h + 1.0))
    if variant == "outlier":
        p0 = prior.a_po / (prior.a_po + prior.b_po)
        return VolatilityState.outlier(np.ones(T), p0)
    if variant == "fat-tail":
        return VolatilityState.fat_tail(np.ones(T), prior.df_l)
    raise ValueError(f"unknown variant {variant!r}")
