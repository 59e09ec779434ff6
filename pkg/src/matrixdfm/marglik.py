"""Marginal likelihood by importance sampling.

Three layers:

* integrated_loglik_batch: p(Y | theta) with the factor path integrated out
  analytically by a Kalman prediction-error decomposition. The innovation
  algebra stays in factor dimension (Woodbury), never in n*k, and the whole
  recursion is vectorized over parameter draws.
* log_prior_batch / ImportanceDensity: normalized prior and fitted proposal
  densities over the identified free parameters only (pinned loading entries
  and the fixed sigma_c[0,0] carry no density).
* importance_sample_log_ml: generic self-normalized estimator with
  batch-means numerical standard errors, reused by the model scan and by
  any toy model that supplies its own callables.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import ndtr
from scipy.stats import beta as beta_dist
from scipy.stats import truncnorm

from . import _banded
from .distributions import (
    inverse_gamma_logpdf,
    inverse_wishart_logpdf,
    mle_beta,
    mle_inverse_gamma,
    mle_inverse_wishart,
    mle_truncated_normal,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_restricted_inverse_wishart,
    truncated_normal_logpdf,
)
from .model import (
    ModelSpec,
    ParameterState,
    PriorConfig,
    free_loading_mask,
    stationary_ok,
)
from .volatility import DEFAULT_GRID

LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# integrated likelihood
# ---------------------------------------------------------------------------

def _omega_batch(spec: ModelSpec, draws: dict) -> np.ndarray:
    """Per-draw scale path omega_t, shape (N, T)."""
    N = draws["A"].shape[0]
    if spec.volatility == "none":
        return np.ones((N, spec.T))
    if spec.volatility == "common-sv":
        return np.exp(draws["h"])
    if spec.volatility == "outlier":
        return draws["o"] ** 2
    return draws["q2"]


def region_ok_batch(rho: np.ndarray) -> np.ndarray:
    """Vectorized sampler-support check, matching model.stationary_ok.

    rho has shape (..., q); the result drops the last axis.
    """
    rho = np.asarray(rho, dtype=float)
    q = rho.shape[-1]
    ball = np.sum(rho ** 2, axis=-1) < 1.0
    if q == 1:
        return ball & (np.abs(rho[..., 0]) < 1.0)
    if q == 2:
        r1, r2 = rho[..., 0], rho[..., 1]
        tri = (r1 + r2 < 1.0) & (r2 - r1 < 1.0) & (np.abs(r2) < 1.0)
        return ball & tri
    flat = rho.reshape(-1, q)
    comp = np.zeros((flat.shape[0], q, q))
    comp[:, 0, :] = flat
    idx = np.arange(q - 1)
    comp[:, idx + 1, idx] = 1.0
    eig = np.linalg.eigvals(comp)
    stat = np.all(np.abs(eig) < 1.0, axis=-1)
    return ball & stat.reshape(rho.shape[:-1])


def _companion_predict(a, P, rho, lam2):
    """One transition a -> R a, P -> R P R' + Q for the stacked-lag state.

    R has diag(rho[:, l-1]) blocks in its first block row and shifted
    identities below; only the structured products are formed.
    """
    N, qpf = a.shape
    pf = lam2.shape[1]
    q = qpf // pf
    ab = a.reshape(N, q, pf)
    a_new = np.empty_like(ab)
    a_new[:, 0] = np.einsum("nfl,nlf->nf", rho, ab)
    if q > 1:
        a_new[:, 1:] = ab[:, :-1]
    Pb = P.reshape(N, q, pf, q, pf)
    P_new = np.empty_like(Pb)
    P_new[:, 0, :, 0, :] = np.einsum("nfl,nlfmg,ngm->nfg", rho, Pb, rho)
    if q > 1:
        top = np.einsum("nfl,nlfjg->nfjg", rho, Pb[:, :, :, : q - 1, :])
        P_new[:, 0, :, 1:, :] = top
        P_new[:, 1:, :, 0, :] = top.transpose(0, 2, 3, 1)
        P_new[:, 1:, :, 1:, :] = Pb[:, : q - 1, :, : q - 1, :]
    ii = np.arange(pf)
    P_new[:, 0, ii, 0, ii] += lam2
    out = P_new.reshape(N, qpf, qpf)
    return a_new.reshape(N, qpf), 0.5 * (out + out.transpose(0, 2, 1))


def _integrated_loglik_chunk(spec: ModelSpec, d: dict, Y: np.ndarray) -> np.ndarray:
    N = d["A"].shape[0]
    T, n, k, pf, q = spec.T, spec.n, spec.k, spec.pf, spec.q
    A, B = d["A"], d["B"]
    rho, lam2 = d["rho"], d["lambda2"]

    valid = region_ok_batch(rho).all(axis=-1)
    rho = np.where(valid[:, None, None], rho, 0.0)

    Sr_inv = np.linalg.inv(d["sigma_r"])
    Sc_inv = np.linalg.inv(d["sigma_c"])
    _, ld_r = np.linalg.slogdet(d["sigma_r"])
    _, ld_c = np.linalg.slogdet(d["sigma_c"])
    AtSr = A.transpose(0, 2, 1) @ Sr_inv            # (N, p1, n)
    ScB = Sc_inv @ B                                 # (N, k, p2)
    Gr = AtSr @ A
    Gc = B.transpose(0, 2, 1) @ ScB
    G0 = np.einsum("nab,ncd->nacbd", Gc, Gr).reshape(N, pf, pf)
    G0 = 0.5 * (G0 + G0.transpose(0, 2, 1))
    omega = _omega_batch(spec, d)
    log_omega = np.log(omega)
    lam_bar = lam2 / (1.0 - np.sum(rho ** 2, axis=-1))
    eye = np.eye(pf)[None]

    ll = np.zeros(N)
    const_t = -0.5 * n * k * LOG2PI - 0.5 * (n * ld_c + k * ld_r)

    def innovations(Vt, om):
        """Returns (quad0, w) for residual Vt at the predicted mean."""
        M1 = Sr_inv @ Vt                             # (N, n, k)
        M2 = Vt.transpose(0, 2, 1) @ M1              # V' Sr^{-1} V
        quad0 = np.einsum("nlm,nml->n", Sc_inv, M2) / om
        w = (AtSr @ Vt @ ScB).transpose(0, 2, 1).reshape(N, pf) / om[:, None]
        return quad0, w

    # first q observations: f_t are a priori iid N(0, diag(lam_bar))
    post_mean = np.empty((N, q, pf))
    post_cov = np.zeros((N, q, pf, pf))
    for t in range(q):
        om = omega[:, t]
        Vt = np.broadcast_to(Y[t], (N, n, k))
        quad0, w = innovations(Vt, om)
        G = G0 / om[:, None, None]
        GP = G * lam_bar[:, None, :]                 # G @ diag(lam_bar)
        S = eye + GP
        _, ld_S = np.linalg.slogdet(S)
        x1 = np.linalg.solve(S, w[..., None])[..., 0]
        quad = quad0 - np.einsum("nf,nf->n", w, lam_bar * x1)
        ll += const_t - 0.5 * (n * k * log_omega[:, t] + ld_S + quad)
        post_mean[:, t] = lam_bar * x1
        corr = lam_bar[:, :, None] * np.linalg.solve(S, GP)
        C = np.zeros((N, pf, pf))
        ii = np.arange(pf)
        C[:, ii, ii] = lam_bar
        post_cov[:, t] = C - corr

    # stack (f_q, ..., f_1) into the companion state and keep filtering
    a = post_mean[:, ::-1].reshape(N, q * pf)
    P = np.zeros((N, q * pf, q * pf))
    for blk in range(q):
        s = slice(blk * pf, (blk + 1) * pf)
        P[:, s, s] = post_cov[:, q - 1 - blk]

    for t in range(q, T):
        a, P = _companion_predict(a, P, rho, lam2)
        om = omega[:, t]
        Fbar = a[:, :pf].reshape(N, spec.p2, spec.p1).transpose(0, 2, 1)
        Vt = Y[t][None] - A @ Fbar @ B.transpose(0, 2, 1)
        quad0, w = innovations(Vt, om)
        G = G0 / om[:, None, None]
        P11 = P[:, :pf, :pf]
        S = eye + G @ P11
        _, ld_S = np.linalg.slogdet(S)
        x1 = np.linalg.solve(S, w[..., None])[..., 0]
        quad = quad0 - np.einsum("nf,nf->n", w, (P11 @ x1[..., None])[..., 0])
        ll += const_t - 0.5 * (n * k * log_omega[:, t] + ld_S + quad)
        U = P[:, :, :pf]                             # (N, qpf, pf)
        a = a + (U @ x1[..., None])[..., 0]
        W2 = np.linalg.solve(S, G)                   # (I + G P11)^{-1} G
        P = P - U @ W2 @ U.transpose(0, 2, 1)
        P = 0.5 * (P + P.transpose(0, 2, 1))

    return np.where(valid, ll, -np.inf)


def integrated_loglik_batch(spec: ModelSpec, draws: dict, Y: np.ndarray,
                            chunk: int = 512) -> np.ndarray:
    """log p(Y | theta) for every parameter draw, factors integrated out."""
    Y = np.asarray(Y, dtype=float)
    N = draws["A"].shape[0]
    out = np.empty(N)
    for s in range(0, N, chunk):
        sub = {key: val[s: s + chunk] for key, val in draws.items()}
        out[s: s + chunk] = _integrated_loglik_chunk(spec, sub, Y)
    return out


def draws_from_state(spec: ModelSpec, state: ParameterState) -> dict:
    """Pack one ParameterState into a batch-of-one draws dict."""
    d = {"A": state.loadings.A[None], "B": state.loadings.B[None],
         "sigma_r": state.idio.sigma_r[None], "sigma_c": state.idio.sigma_c[None],
         "rho": state.dynamics.rho[None], "lambda2": state.dynamics.lambda2[None]}
    v = state.vol
    if v.variant == "common-sv":
        d.update(h=v.h[None], phi=np.array([v.phi]),
                 sigma_h2=np.array([v.sigma_h2]))
    elif v.variant == "outlier":
        d.update(o=v.o[None], p_o=np.array([v.p_o]))
    elif v.variant == "fat-tail":
        d.update(q2=v.q2[None])
    return d


def integrated_loglik(spec: ModelSpec, state: ParameterState, Y) -> float:
    """Scalar integrated likelihood of one parameter configuration."""
    return float(integrated_loglik_batch(spec, draws_from_state(spec, state), Y)[0])


# ---------------------------------------------------------------------------
# prior density over the free parameters
# ---------------------------------------------------------------------------

def _loading_prior_logpdf_diag(flatM, diagSig, V, M0, n, p):
    """Row-factorized form of _loading_prior_logpdf for diagonal Sig.

    With Sig = diag(s) the Kronecker covariance is block diagonal across
    series, so the pinned-coordinate conditioning stays inside each of the
    first p rows and the cost is linear in n instead of cubic.
    """
    N = flatM.shape[0]
    M = flatM.reshape(N, n, p)
    out = np.zeros(N)
    Vinv = np.linalg.inv(V)
    _, ldV = np.linalg.slogdet(V)
    if n > p:
        dev = M[:, p:, :] - M0[None, p:, :]
        quad = np.einsum("nip,pq,niq->ni", dev, Vinv, dev) / diagSig[:, p:]
        out -= 0.5 * (quad.sum(axis=1) + (n - p) * (p * LOG2PI + ldV)
                      + p * np.log(diagSig[:, p:]).sum(axis=1))
    for i in range(1, p):
        # row i < p: coords j >= i are pinned at e_i, coords j < i are free
        K = np.linalg.solve(V[i:, i:], V[i:, :i]).T
        pin = np.zeros(p - i)
        pin[0] = 1.0
        cmean = M0[i, :i] + K @ (pin - M0[i, i:])
        schur = V[:i, :i] - K @ V[i:, :i]
        schur = 0.5 * (schur + schur.T)
        sign, ld = np.linalg.slogdet(schur)
        if sign <= 0:
            return np.full(N, -np.inf)
        dev = M[:, i, :i] - cmean[None]
        quad = np.einsum("nf,fg,ng->n", dev, np.linalg.inv(schur), dev)
        out -= 0.5 * (i * (LOG2PI + np.log(diagSig[:, i])) + ld
                      + quad / diagSig[:, i])
    return np.where((diagSig > 0).all(axis=1), out, -np.inf)


def _loading_prior_logpdf(flatM, Sig, V, M0, n, p, chunk=512, diag=False):
    """Density of the free loading entries given the pinned ones.

    Joint prior: vec of the p x n transpose is N(vec, Sig kron V) under the
    series-major flattening flat[i*p + j] = M[i, j]; the pinned coordinates
    condition the free block (Schur complement per draw).  Callers that know
    every Sig draw is diagonal pass diag=True to route around the dense
    n*p Kronecker build, which is prohibitive for wide stacked panels.
    """
    N = flatM.shape[0]
    mask = free_loading_mask(n, p).ravel()
    fidx = np.nonzero(mask)[0]
    pidx = np.nonzero(~mask)[0]
    if fidx.size == 0:
        return np.zeros(N)
    if diag:
        diagSig = np.diagonal(Sig, axis1=-2, axis2=-1)
        return _loading_prior_logpdf_diag(flatM, diagSig, V, M0, n, p)
    mu = M0.ravel()
    pin_template = np.zeros((n, p))
    pin_template[:p, :p] = np.eye(p)
    pinvals = pin_template.ravel()[pidx]
    dev_p = pinvals - mu[pidx]
    df = fidx.size
    out = np.empty(N)
    for s in range(0, N, chunk):
        Sg = Sig[s: s + chunk]
        m = Sg.shape[0]
        C = np.einsum("nab,cd->nacbd", Sg, V).reshape(m, n * p, n * p)
        Cpp = C[:, pidx[:, None], pidx[None, :]]
        Cfp = C[:, fidx[:, None], pidx[None, :]]
        Cff = C[:, fidx[:, None], fidx[None, :]]
        sol = np.linalg.solve(Cpp, np.broadcast_to(dev_p, (m, pidx.size))[..., None])
        cmean = mu[fidx][None] + (Cfp @ sol)[..., 0]
        ccov = Cff - Cfp @ np.linalg.solve(Cpp, Cfp.transpose(0, 2, 1))
        ccov = 0.5 * (ccov + ccov.transpose(0, 2, 1))
        dev = flatM[s: s + chunk][:, fidx] - cmean
        sign, ld = np.linalg.slogdet(ccov)
        quad = np.einsum("nf,nf->n", dev,
                         np.linalg.solve(ccov, dev[..., None])[..., 0])
        vals = -0.5 * (df * LOG2PI + ld + quad)
        out[s: s + chunk] = np.where(sign > 0, vals, -np.inf)
    return out


_RHO_LOGZ_CACHE: dict = {}


def _rho_region_logz(q: int, rho0: float, v: float) -> float:
    """log normalizer of the N(rho0, v I_q) prior restricted to the sampler
    support (stationary and inside the unit ball)."""
    key = (q, float(rho0), float(v))
    if key in _RHO_LOGZ_CACHE:
        return _RHO_LOGZ_CACHE[key]
    sd = np.sqrt(v)
    if q == 1:
        z = float(np.log(ndtr((1.0 - rho0) / sd) - ndtr((-1.0 - rho0) / sd)))
    elif q == 2:
        m = 400  # midpoint rule; the integrand has a kink at the boundary
        grid = (np.arange(m) + 0.5) / m * 2.0 - 1.0
        r1, r2 = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([r1.ravel(), r2.ravel()], axis=-1)
        ok = region_ok_batch(pts)
        dens = np.exp(-0.5 * np.sum((pts - rho0) ** 2, axis=-1) / v)
        dens /= (2.0 * np.pi * v)
        z = float(np.log(np.sum(dens * ok) * (2.0 / m) ** 2))
    else:
        rng = np.random.default_rng(np.random.SeedSequence(20240915))
        samp = rho0 + sd * rng.standard_normal((200_000, q))
        z = float(np.log(max(np.mean(region_ok_batch(samp)), 1e-300)))
    _RHO_LOGZ_CACHE[key] = z
    return z


def log_prior_batch(spec: ModelSpec, prior: PriorConfig, draws: dict,
                    chunk: int = 512) -> np.ndarray:
    """Normalized log prior of each draw over the free parameters."""
    N = draws["A"].shape[0]
    n, k, pf, q = spec.n, spec.k, spec.pf, spec.q
    lp = np.zeros(N)

    if spec.idio == "kronecker-cross":
        lp += inverse_wishart_logpdf(draws["sigma_r"], prior.nu_r, prior.S_r)
        if k > 1:
            lp += inverse_wishart_logpdf(draws["sigma_c"], prior.nu_c, prior.S_c)
            lp -= inverse_gamma_logpdf(1.0, 0.5 * (prior.nu_c - k + 1),
                                       0.5 * prior.S_c[0, 0])
    else:
        dr = np.diagonal(draws["sigma_r"], axis1=-2, axis2=-1)
        lp += inverse_gamma_logpdf(dr, 0.5 * (prior.nu_r - n + 1),
                                   0.5 * np.diag(prior.S_r)).sum(axis=-1)
        if k > 1:
            dc = np.diagonal(draws["sigma_c"], axis1=-2, axis2=-1)[:, 1:]
            lp += inverse_gamma_logpdf(dc, 0.5 * (prior.nu_c - k + 1),
                                       0.5 * np.diag(prior.S_c)[1:]).sum(axis=-1)

    diag_idio = spec.idio != "kronecker-cross"
    lp += _loading_prior_logpdf(draws["A"].reshape(N, -1), draws["sigma_r"],
                                prior.V_A, prior.A0, n, spec.p1, chunk,
                                diag=diag_idio)
    lp += _loading_prior_logpdf(draws["B"].reshape(N, -1), draws["sigma_c"],
                                prior.V_B, prior.B0, k, spec.p2, chunk,
                                diag=diag_idio)

    rho = draws["rho"]
    ok = region_ok_batch(rho).all(axis=-1)
    g = -0.5 * ((rho - prior.rho0) ** 2 / prior.v_rho
                + np.log(2.0 * np.pi * prior.v_rho))
    lp += g.sum(axis=(-2, -1)) - pf * _rho_region_logz(q, prior.rho0, prior.v_rho)
    lp = np.where(ok, lp, -np.inf)

    if spec.factor_scale == "free":
        lp += inverse_gamma_logpdf(draws["lambda2"], prior.nu_lambda,
                                   prior.s_lambda).sum(axis=-1)

    if spec.volatility == "common-sv":
        h, phi, s2h = draws["h"], draws["phi"], draws["sigma_h2"]
        T = spec.T
        quad = ((1.0 - phi ** 2) * h[:, 0] ** 2
                + np.sum((h[:, 1:] - phi[:, None] * h[:, :-1]) ** 2, axis=1))
        lp += (-0.5 * T * LOG2PI - 0.5 * (T * np.log(s2h) - np.log1p(-phi ** 2))
               - 0.5 * quad / s2h)
        lp += truncated_normal_logpdf(phi, prior.phi0, prior.v_phi)
        lp += inverse_gamma_logpdf(s2h, prior.nu_h, prior.s_h)
    elif spec.volatility == "outlier":
        o, p_o = draws["o"], draws["p_o"]
        n1 = np.sum(o == 1, axis=1)
        T = spec.T
        lp += (n1 * np.log1p(-p_o)
               + (T - n1) * (np.log(p_o) - np.log(DEFAULT_GRID.support.size - 1.0)))
        lp += beta_dist.logpdf(p_o, prior.a_po, prior.b_po)
    elif spec.volatility == "fat-tail":
        half = 0.5 * prior.df_l
        lp += inverse_gamma_logpdf(draws["q2"], half, half).sum(axis=-1)
    return lp


# ---------------------------------------------------------------------------
# importance-density blocks (cross-entropy fits to posterior draws)
# ---------------------------------------------------------------------------

@dataclass
class _GaussBlock:
    mean: np.ndarray
    chol: np.ndarray | None      # full-covariance factor, or None
    var: np.ndarray | None       # diagonal variances, or None

    @classmethod
    def fit(cls, x: np.ndarray, max_full: int = 200) -> "_GaussBlock":
        mean = x.mean(axis=0)
        d = x.shape[1]
        if d <= max_full:
            cov = np.cov(x, rowvar=False).reshape(d, d)
            cov += (1e-9 * max(np.trace(cov) / d, 1e-12)) * np.eye(d)
            try:
                return cls(mean=mean, chol=np.linalg.cholesky(cov), var=None)
            except np.linalg.LinAlgError:
                pass
        var = np.maximum(x.var(axis=0), 1e-12)
        return cls(mean=mean, chol=None, var=var)

    def sample(self, n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, self.mean.size))
        if self.chol is not None:
            return self.mean[None] + z @ self.chol.T
        return self.mean[None] + z * np.sqrt(self.var)[None]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        dev = x - self.mean[None]
        d = self.mean.size
        if self.chol is not None:
            u = sla.solve_triangular(self.chol, dev.T, lower=True)
            ld = 2.0 * np.sum(np.log(np.diag(self.chol)))
            return -0.5 * (d * LOG2PI + ld + np.sum(u * u, axis=0))
        return -0.5 * (d * LOG2PI + np.sum(np.log(self.var))
                       + np.sum(dev * dev / self.var[None], axis=1))


@dataclass
class _IgBlock:
    shape: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "_IgBlock":
        fits = [mle_inverse_gamma(x[:, j]) for j in range(x.shape[1])]
        return cls(shape=np.array([f[0] for f in fits]),
                   scale=np.array([f[1] for f in fits]))

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_inverse_gamma(self.shape, self.scale, rng,
                                    size=(n, self.shape.size))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return inverse_gamma_logpdf(x, self.shape, self.scale).sum(axis=-1)


@dataclass
class _TnBlock:
    mu: np.ndarray
    var: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    @classmethod
    def fit(cls, x: np.ndarray, lo=-1.0, hi=1.0) -> "_TnBlock":
        fits = [mle_truncated_normal(x[:, j], lo, hi) for j in range(x.shape[1])]
        return cls(mu=np.array([f[0] for f in fits]),
                   var=np.array([f[1] for f in fits]), lo=lo, hi=hi)

    def sample(self, n: int, rng) -> np.ndarray:
        sd = np.sqrt(self.var)
        a = (self.lo - self.mu) / sd
        b = (self.hi - self.mu) / sd
        return truncnorm.rvs(a, b, loc=self.mu, scale=sd,
                             size=(n, self.mu.size), random_state=rng)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return truncated_normal_logpdf(x, self.mu, self.var,
                                       self.lo, self.hi).sum(axis=-1)


@dataclass
class _IwBlock:
    nu: float
    S: np.ndarray
    restricted: bool = False

    @classmethod
    def fit(cls, x: np.ndarray, restricted: bool = False) -> "_IwBlock":
        nu, S = mle_inverse_wishart(x)
        return cls(nu=nu, S=S, restricted=restricted)

    def sample(self, n: int, rng) -> np.ndarray:
        if self.restricted:
            return np.stack([sample_restricted_inverse_wishart(self.nu, self.S, rng)
                             for _ in range(n)])
        return np.stack([sample_inverse_wishart(self.nu, self.S, rng)
                         for _ in range(n)])

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        out = inverse_wishart_logpdf(x, self.nu, self.S)
        if self.restricted:
            d = self.S.shape[0]
            out = out - inverse_gamma_logpdf(1.0, 0.5 * (self.nu - d + 1),
                                             0.5 * self.S[0, 0])
        return out


@dataclass
class _ArPathBlock:
    """Gaussian over a latent path with AR(1)-structured banded precision:
    per-period means, one pooled AR coefficient, per-period innovation
    variances (2T + 1 parameters)."""

    mu: np.ndarray
    phi: float
    dvar: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "_ArPathBlock":
        mu = x.mean(axis=0)
        z = x - mu[None]
        num = float(np.sum(z[:, 1:] * z[:, :-1]))
        den = float(np.sum(z[:, :-1] ** 2))
        phi = np.clip(num / den if den > 0 else 0.0, -0.999, 0.999)
        resid = z[:, 1:] - phi * z[:, :-1]
        dvar = np.empty(x.shape[1])
        dvar[0] = max(z[:, 0].var(), 1e-10)
        dvar[1:] = np.maximum(resid.var(axis=0), 1e-10)
        return cls(mu=mu, phi=float(phi), dvar=dvar)

    def _prec_banded(self) -> np.ndarray:
        T = self.mu.size
        ab = np.zeros((2, T))
        ab[0] = 1.0 / self.dvar
        ab[0, :-1] += self.phi ** 2 / self.dvar[1:]
        ab[1, :-1] = -self.phi / self.dvar[1:]
        return ab

    def sample(self, n: int, rng) -> np.ndarray:
        cb = _banded.chol_banded(self._prec_banded())
        z = rng.standard_normal((self.mu.size, n))
        x = sla.solve_banded((0, 1), _lt_transpose_banded(cb), z)
        return self.mu[None] + x.T

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        ab = self._prec_banded()
        dev = x - self.mu[None]
        quad = np.sum(dev * dev * ab[0][None], axis=1)
        quad += 2.0 * np.sum(dev[:, 1:] * dev[:, :-1] * ab[1, :-1][None], axis=1)
        ld = -np.sum(np.log(self.dvar))
        return -0.5 * (self.mu.size * LOG2PI - ld + quad)


def _lt_transpose_banded(cb: np.ndarray) -> np.ndarray:
    """Repack a lower banded Cholesky factor as the (0, bw) upper banded
    storage of its transpose, for scipy.linalg.solve_banded."""
    bw = cb.shape[0] - 1
    n = cb.shape[1]
    ab = np.zeros((bw + 1, n))
    for dd in range(bw + 1):
        ab[bw - dd, dd:] = cb[dd, : n - dd]
    return ab


@dataclass
class _CatPathBlock:
    logp: np.ndarray     # (T, m) per-period log masses
    support: np.ndarray  # (m,) grid values

    @classmethod
    def fit(cls, x: np.ndarray, support: np.ndarray) -> "_CatPathBlock":
        N = x.shape[0]
        p = (x[:, :, None] == support[None, None, :]).mean(axis=0)
        p = np.maximum(p, 1.0 / (support.size * N))
        p /= p.sum(axis=1, keepdims=True)
        return cls(logp=np.log(p), support=support.astype(float))

    def sample(self, n: int, rng) -> np.ndarray:
        cum = np.cumsum(np.exp(self.logp), axis=1)
        u = rng.random((n, self.logp.shape[0]))
        idx = (u[:, :, None] > cum[None, :, :]).sum(axis=2)
        return self.support[idx]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.support, x)
        t = np.arange(self.logp.shape[0])[None, :]
        return self.logp[t, idx].sum(axis=1)


@dataclass
class _BetaBlock:
    a: float
    b: float

    @classmethod
    def fit(cls, x: np.ndarray) -> "_BetaBlock":
        a, b = mle_beta(x)
        return cls(a=float(a), b=float(b))

    def sample(self, n: int, rng) -> np.ndarray:
        return np.clip(rng.beta(self.a, self.b, size=n), 1e-12, 1.0 - 1e-12)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return beta_dist.logpdf(x, self.a, self.b)


# ---------------------------------------------------------------------------
# assembled importance density
# ---------------------------------------------------------------------------

class ImportanceDensity:
    """Independent fitted blocks over the free parameters of one model."""

    def __init__(self, spec: ModelSpec, blocks: dict):
        self.spec = spec
        self.blocks = blocks

    @classmethod
    def fit(cls, spec: ModelSpec, store) -> "ImportanceDensity":
        blocks: dict = {}
        maskA = free_loading_mask(spec.n, spec.p1)
        if maskA.any():
            blocks["A"] = _GaussBlock.fit(store.A[:, maskA])
        maskB = free_loading_mask(spec.k, spec.p2)
        if maskB.any():
            blocks["B"] = _GaussBlock.fit(store.B[:, maskB])
        if spec.idio == "kronecker-cross":
            blocks["sigma_r"] = _IwBlock.fit(store.sigma_r)
            if spec.k > 1:
                blocks["sigma_c"] = _IwBlock.fit(store.sigma_c, restricted=True)
        else:
            dr = np.diagonal(store.sigma_r, axis1=-2, axis2=-1)
            blocks["sigma_r"] = _IgBlock.fit(dr)
            if spec.k > 1:
                dc = np.diagonal(store.sigma_c, axis1=-2, axis2=-1)[:, 1:]
                blocks["sigma_c"] = _IgBlock.fit(dc)
        N = store.rho.shape[0]
        blocks["rho"] = _TnBlock.fit(store.rho.reshape(N, -1))
        if spec.factor_scale == "free":
            blocks["lambda2"] = _IgBlock.fit(store.lambda2)
        if spec.volatility == "common-sv":
            blocks["h"] = _ArPathBlock.fit(store.h)
            blocks["phi"] = _TnBlock.fit(store.phi[:, None])
            blocks["sigma_h2"] = _IgBlock.fit(store.sigma_h2[:, None])
        elif spec.volatility == "outlier":
            blocks["o"] = _CatPathBlock.fit(store.o, DEFAULT_GRID.support)
            blocks["p_o"] = _BetaBlock.fit(store.p_o)
        elif spec.volatility == "fat-tail":
            blocks["q2"] = _IgBlock.fit(store.q2)
        return cls(spec, blocks)

    # draw assembly -----------------------------------------------------

    def _embed_loading(self, flat: np.ndarray | None, n: int, p: int,
                       count: int) -> np.ndarray:
        out = np.zeros((count, n, p))
        out[:, :p, :p] = np.eye(p)[None]
        if flat is not None:
            out[:, free_loading_mask(n, p)] = flat
        return out

    def sample(self, n: int, rng) -> dict:
        spec = self.spec
        b = self.blocks
        draws: dict = {}
        draws["A"] = self._embed_loading(
            b["A"].sample(n, rng) if "A" in b else None, spec.n, spec.p1, n)
        draws["B"] = self._embed_loading(
            b["B"].sample(n, rng) if "B" in b else None, spec.k, spec.p2, n)
        if spec.idio == "kronecker-cross":
            draws["sigma_r"] = b["sigma_r"].sample(n, rng)
            if spec.k > 1:
                draws["sigma_c"] = b["sigma_c"].sample(n, rng)
            else:
                draws["sigma_c"] = np.ones((n, 1, 1))
        else:
            dr = b["sigma_r"].sample(n, rng)
            draws["sigma_r"] = dr[:, :, None] * np.eye(spec.n)[None]
            sc = np.ones((n, spec.k))
            if spec.k > 1:
                sc[:, 1:] = b["sigma_c"].sample(n, rng)
            draws["sigma_c"] = sc[:, :, None] * np.eye(spec.k)[None]
        draws["rho"] = b["rho"].sample(n, rng).reshape(n, spec.pf, spec.q)
        if spec.factor_scale == "free":
            draws["lambda2"] = b["lambda2"].sample(n, rng)
        else:
            draws["lambda2"] = np.ones((n, spec.pf))
        if spec.volatility == "common-sv":
            draws["h"] = b["h"].sample(n, rng)
            draws["phi"] = b["phi"].sample(n, rng)[:, 0]
            draws["sigma_h2"] = b["sigma_h2"].sample(n, rng)[:, 0]
        elif spec.volatility == "outlier":
            draws["o"] = b["o"].sample(n, rng)
            draws["p_o"] = b["p_o"].sample(n, rng)
        elif spec.volatility == "fat-tail":
            draws["q2"] = b["q2"].sample(n, rng)
        return draws

    def logpdf(self, draws: dict) -> np.ndarray:
        spec = self.spec
        b = self.blocks
        N = draws["A"].shape[0]
        out = np.zeros(N)
        if "A" in b:
            out += b["A"].logpdf(draws["A"][:, free_loading_mask(spec.n, spec.p1)])
        if "B" in b:
            out += b["B"].logpdf(draws["B"][:, free_loading_mask(spec.k, spec.p2)])
        if spec.idio == "kronecker-cross":
            out += b["sigma_r"].logpdf(draws["sigma_r"])
            if spec.k > 1:
                out += b["sigma_c"].logpdf(draws["sigma_c"])
        else:
            out += b["sigma_r"].logpdf(
                np.diagonal(draws["sigma_r"], axis1=-2, axis2=-1))
            if spec.k > 1:
                out += b["sigma_c"].logpdf(
                    np.diagonal(draws["sigma_c"], axis1=-2, axis2=-1)[:, 1:])
        out += b["rho"].logpdf(draws["rho"].reshape(N, -1))
        if spec.factor_scale == "free":
            out += b["lambda2"].logpdf(draws["lambda2"])
        if spec.volatility == "common-sv":
            out += b["h"].logpdf(draws["h"])
            out += b["phi"].logpdf(draws["phi"][:, None])
            out += b["sigma_h2"].logpdf(draws["sigma_h2"][:, None])
        elif spec.volatility == "outlier":
            out += b["o"].logpdf(draws["o"])
            out += b["p_o"].logpdf(draws["p_o"])
        elif spec.volatility == "fat-tail":
            out += b["q2"].logpdf(draws["q2"])
        return out


def fit_importance_density(store) -> ImportanceDensity:
    """Cross-entropy fit of the proposal to a chain's posterior draws."""
    if store.n_draws < 100:
        raise ValueError(
            f"need at least 100 retained draws to fit the proposal, "
            f"got {store.n_draws}")
    return ImportanceDensity.fit(store.spec, store)


# ---------------------------------------------------------------------------
# the estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlEstimate:
    log_ml: float
    nse: float
    ess: float
    n_draws: int
    max_weight_share: float
    degenerate: bool

    def __str__(self) -> str:
        return f"{self.log_ml:.3f} ({self.nse:.3f})"


def ml_from_log_weights(log_w: np.ndarray, n_batches: int = 20) -> MlEstimate:
    """Self-normalized estimate, batch-means NSE (delta method on the log
    scale), effective sample size, the largest single weight's share, and a
    weight-degeneracy flag."""
    log_w = np.asarray(log_w, dtype=float)
    n = log_w.size
    finite = np.isfinite(log_w)
    if not finite.any():
        raise ValueError("all importance weights are zero")
    c = float(np.max(log_w[finite]))
    w = np.where(finite, np.exp(log_w - c), 0.0)
    mu = float(w.mean())
    log_ml = c + float(np.log(mu))
    ess = float(w.sum() ** 2 / np.sum(w ** 2))
    max_share = float(w.max() / w.sum())
    nb = min(n_batches, n)
    means = np.array([b.mean() for b in np.array_split(w, nb)])
    se = float(means.std(ddof=1) / np.sqrt(nb)) if nb > 1 else np.inf
    nse = se / mu
    degenerate = ess < 0.01 * n
    if degenerate:
        warnings.warn(f"importance weights degenerate: ESS {ess:.1f} of {n}",
                      RuntimeWarning)
    return MlEstimate(log_ml=log_ml, nse=nse, ess=ess, n_draws=n,
                      max_weight_share=max_share, degenerate=degenerate)


def importance_sample_log_ml(sample_g, log_g, log_prior, log_lik,
                             n_draws: int, rng, n_batches: int = 20,
                             chunk: int | None = None) -> MlEstimate:
    """Generic self-normalized importance-sampling marginal likelihood.

    The callables share one opaque draws object: sample_g(n, rng) -> draws,
    each log_* maps draws -> (n,) log densities. With chunk set, draws are
    generated and scored chunk at a time so only one chunk of parameter
    draws is ever resident (covariance draws get large on wide panels).
    """
    if chunk is None or chunk >= n_draws:
        draws = sample_g(n_draws, rng)
        log_w = log_lik(draws) + log_prior(draws) - log_g(draws)
        return ml_from_log_weights(log_w, n_batches)
    parts = []
    left = n_draws
    while left > 0:
        m = min(chunk, left)
        draws = sample_g(m, rng)
        parts.append(log_lik(draws) + log_prior(draws) - log_g(draws))
        left -= m
    return ml_from_log_weights(np.concatenate(parts), n_batches)


def estimate_log_ml(spec: ModelSpec, prior: PriorConfig, data: np.ndarray,
                    store=None, density: ImportanceDensity | None = None,
                    n_draws: int = 2000, seed: int | None = 0, rng=None,
                    chunk: int = 512, n_batches: int = 20) -> MlEstimate:
    """Marginal likelihood of one fitted model by importance sampling."""
    if density is None:
        if store is None:
            raise ValueError("need a posterior store or a fitted density")
        density = fit_importance_density(store)
    if rng is None:
        rng = np.random.default_rng(seed)
    return importance_sample_log_ml(
        density.sample, density.logpdf,
        lambda d: log_prior_batch(spec, prior, d, chunk),
        lambda d: integrated_loglik_batch(spec, d, data, chunk),
        n_draws, rng, n_batches, chunk=chunk)


# ---------------------------------------------------------------------------
# model scan over factor dimensions
# ---------------------------------------------------------------------------

@dataclass
class CandidateResult:
    p1: int
    p2: int
    status: str                  # "ok" | "failed"
    log_ml: float | None = None
    nse: float | None = None
    ess: float | None = None
    degenerate: bool = False
    error: str | None = None


@dataclass
class ScanResult:
    candidates: list
    n: int
    k: int
    T: int
    settings: dict

    def best(self) -> CandidateResult | None:
        ok = [c for c in self.candidates if c.status == "ok"]
        return max(ok, key=lambda c: c.log_ml) if ok else None

    def to_dict(self) -> dict:
        best = self.best()
        return {
            "n": self.n, "k": self.k, "T": self.T,
            "settings": self.settings,
            "candidates": [dataclasses.asdict(c) for c in self.candidates],
            "best": {"p1": best.p1, "p2": best.p2} if best else None,
        }


def ml_model_scan(data: np.ndarray, candidates, volatility: str = "none",
                  idio: str = "kronecker-cross", q: int = 1,
                  factor_scale: str = "free",
                  config: "McmcConfig" = None, n_is: int = 2000,
                  seed: int = 0, prior_fn=None) -> ScanResult:
    """Fit and score every (p1, p2) candidate on one dataset.

    A failed candidate is recorded with its error and the scan continues.
    """
    from .gibbs import McmcConfig, run_chain
    from .model import default_prior

    data = np.asarray(data, dtype=float)
    T, n, k = data.shape
    if config is None:
        # thinned draws keep the proposal fit from chasing chain autocorrelation
        config = McmcConfig(burn_in=500, draws=1200, thin=3)
    if prior_fn is None:
        prior_fn = default_prior
    children = np.random.SeedSequence(seed).spawn(len(candidates))
    rows = []
    for (p1, p2), child in zip(candidates, children):
        chain_seed, is_seed = [int(s.generate_state(1)[0]) for s in child.spawn(2)]
        try:
            spec = ModelSpec(n=n, k=k, T=T, p1=int(p1), p2=int(p2), q=q,
                             volatility=volatility, idio=idio,
                             factor_scale=factor_scale)
            prior = prior_fn(spec)
            cfg = dataclasses.replace(config, seed=chain_seed, store_factors=False)
            store = run_chain(spec, prior, cfg, data)
            density = fit_importance_density(store)
            del store  # free the draw arrays before the IS pass
            est = estimate_log_ml(spec, prior, data, density=density,
                                  n_draws=n_is,
                                  rng=np.random.default_rng(is_seed))
            rows.append(CandidateResult(p1=int(p1), p2=int(p2), status="ok",
                                        log_ml=est.log_ml, nse=est.nse,
                                        ess=est.ess, degenerate=est.degenerate))
        except Exception as e:  # record and continue scanning
            rows.append(CandidateResult(p1=int(p1), p2=int(p2), status="failed",
                                        error=f"{type(e).__name__}: {e}"))
    settings = {"volatility": volatility, "idio": idio, "q": q,
                "factor_scale": factor_scale, "n_is": n_is, "seed": seed,
                "burn_in": config.burn_in, "draws": config.draws}
    return ScanResult(candidates=rows, n=n, k=k, T=T, settings=settings)


def format_scan_table(scan: ScanResult) -> str:
    """Aligned text table of the scan, one 'estimate (NSE)' column."""
    rows = []
    for c in scan.candidates:
        if c.status == "ok":
            val = f"{c.log_ml:.3f} ({c.nse:.3f})"
            extra = f"{c.ess:8.1f}" + ("  degenerate" if c.degenerate else "")
        else:
            val = "failed"
            extra = c.error or ""
        rows.append((str(c.p1), str(c.p2), val, extra))
    w1 = max(2, *(len(r[0]) for r in rows))
    w2 = max(2, *(len(r[1]) for r in rows))
    w3 = max(len("log-ML (NSE)"), *(len(r[2]) for r in rows))
    lines = [f"{'p1':>{w1}}  {'p2':>{w2}}  {'log-ML (NSE)':>{w3}}  {'ESS':>8}"]
    for r in rows:
        lines.append(f"{r[0]:>{w1}}  {r[1]:>{w2}}  {r[2]:>{w3}}  {r[3]}")
    best = scan.best()
    if best is not None:
        lines.append(f"best: p1={best.p1} p2={best.p2}")
    return "\n".join(lines)
