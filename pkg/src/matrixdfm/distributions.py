"""Random samplers and ML fitters for the distribution families used by the
Gibbs sampler and the cross-entropy importance densities.

Conventions (used consistently across the package):

* vec() is column-major everywhere.
* Inverse-Wishart IW(nu, S): Sigma ~ IW(nu, S) iff Sigma^{-1} ~ W(nu, S^{-1});
  density proportional to |Sigma|^{-(nu+d+1)/2} exp(-tr(S Sigma^{-1})/2),
  E[Sigma] = S/(nu-d-1). Matches scipy.stats.invwishart.
* Inverse-gamma IG(shape, scale): density ~ x^{-shape-1} exp(-scale/x),
  E[x] = scale/(shape-1).

All samplers take an explicit numpy Generator and are deterministic given it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, multigammaln, polygamma
from scipy.stats import beta as beta_dist
from scipy.stats import truncnorm


class DegenerateTruncationError(ValueError):
    """Truncation interval carries no usable probability mass."""


@dataclass(frozen=True)
class LinearConstraint:
    """Linear restriction M x = a0 on a d-dimensional Gaussian.

    M must have linearly independent rows. When every row of M is a unit
    vector (pure coordinate pins, the loading-identification case) the
    pinned coordinates are snapped exactly after the projection.
    """

    M: np.ndarray
    a0: np.ndarray
    pin_idx: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        a0 = np.atleast_1d(np.asarray(self.a0, dtype=float))
        if M.shape[0] != a0.shape[0]:
            raise ValueError("constraint rows and target length differ")
        if M.shape[0] > M.shape[1]:
            raise ValueError("more constraints than dimensions")
        if M.shape[0] and np.linalg.matrix_rank(M) < M.shape[0]:
            raise ValueError("constraint rows are linearly dependent")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a0", a0)
        # detect pure coordinate pins so draws can satisfy them exactly
        pins = None
        if M.shape[0]:
            is_unit = (np.abs(M).sum(axis=1) == 1.0) & (M.max(axis=1) == 1.0)
            if is_unit.all():
                pins = np.argmax(M, axis=1)
        object.__setattr__(self, "pin_idx", pins)

    @classmethod
    def pins(cls, indices, values, dim: int) -> "LinearConstraint":
        """Constraint fixing x[indices] = values in a dim-vector."""
        indices = np.asarray(indices, dtype=int)
        M = np.zeros((len(indices), dim))
        M[np.arange(len(indices)), indices] = 1.0
        return cls(M, np.asarray(values, dtype=float))

    @property
    def r(self) -> int:
        return self.M.shape[0]


@dataclass(frozen=True)
class WishartFit:
    """Wishart MLE result: K_m ~ W(delta, psi) with E[K] = delta * psi."""

    delta: float
    psi: np.ndarray
    converged: bool = True
    n_iter: int = 0
    grad: float = 0.0

    def __post_init__(self):
        d = self.psi.shape[0]
        if self.delta <= d - 1:
            raise ValueError("delta must exceed d-1")


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def sample_matrix_normal(mean, row_prec_chol, col_cov_chol, rng) -> np.ndarray:
    """Draw X = mean + L_K^{-T} Z L_S' for a p x n matrix.

    row_prec_chol is the lower Cholesky factor L_K of the row precision K,
    col_cov_chol the lower factor L_S of the column covariance S, so
    vec(X) ~ N(vec(mean), S kron K^{-1}).
    """
    mean = np.asarray(mean, dtype=float)
    p, n = mean.shape
    if row_prec_chol.shape != (p, p) or col_cov_chol.shape != (n, n):
        raise ValueError("Cholesky factors do not conform to mean shape")
    Z = rng.standard_normal((p, n))
    W = sla.solve_triangular(row_prec_chol, Z, lower=True, trans="T")
    return mean + W @ col_cov_chol.T


def kron_cov_apply(row_cov, col_cov, x) -> np.ndarray:
    """(col_cov kron row_cov) x for a column-major vec x of a p x n matrix."""
    p = row_cov.shape[0]
    n = col_cov.shape[0]
    X = x.reshape((p, n), order="F")
    return (row_cov @ X @ col_cov).reshape(-1, order="F")


def sample_constrained_gaussian(mean, col_cov, row_cov, constraint: LinearConstraint,
                                rng) -> np.ndarray:
    """Draw x ~ N(mean, col_cov kron row_cov) conditioned on M x = a0.

    mean is a d-vector with d = p*n, the column-major vec of a p x n matrix
    (p = row_cov dim, n = col_cov dim). Unconstrained draw first, then the
    exact conditional-Gaussian projection
        x = x_u + Cov M' (M Cov M')^{-1} (a0 - M x_u).
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    p, n = row_cov.shape[0], col_cov.shape[0]
    if mean.size != p * n:
        raise ValueError("mean length does not match covariance dimensions")
    L_r = _chol(row_cov, "row covariance")
    L_c = _chol(col_cov, "column covariance")
    Z = rng.standard_normal((p, n))
    x_u = mean + (L_r @ Z @ L_c.T).reshape(-1, order="F")
    if constraint.r == 0:
        return x_u
    # U = Cov M' column by column through the Kronecker identity
    U = np.stack([kron_cov_apply(row_cov, col_cov, m) for m in constraint.M], axis=1)
    W = constraint.M @ U
    try:
        cw = sla.cho_factor(0.5 * (W + W.T), lower=True)
    except np.linalg.LinAlgError as e:  # pragma: no cover - defensive
        raise np.linalg.LinAlgError(f"redundant constraints: {e}")
    x = x_u + U @ sla.cho_solve(cw, constraint.a0 - constraint.M @ x_u)
    if constraint.pin_idx is not None:
        x[constraint.pin_idx] = constraint.a0
    return x


def _chol(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(f"{what} is not positive definite")


def _bartlett_lower(nu: float, d: int, rng) -> np.ndarray:
    """Lower-triangular Bartlett factor A with AA' ~ W_d(nu, I)."""
    A = np.zeros((d, d))
    for i in range(d):
        # chi-square via Gamma(df/2, 2)
        A[i, i] = np.sqrt(rng.gamma((nu - i) / 2.0, 2.0))
    idx = np.tril_indices(d, -1)
    A[idx] = rng.standard_normal(len(idx[0]))
    return A


def sample_inverse_wishart(nu: float, S, rng) -> np.ndarray:
    """Draw Sigma ~ IW(nu, S), i.e. Sigma^{-1} ~ W(nu, S^{-1})."""
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    if nu <= d - 1:
        raise ValueError("degrees of freedom must exceed d-1")
    L_S = _chol(S, "scale matrix")
    A = _bartlett_lower(nu, d, rng)
    # Sigma = L_S A^{-T} A^{-1} L_S' = V'V with V = A^{-1} L_S'
    V = sla.solve_triangular(A, L_S.T, lower=True)
    Sig = V.T @ V
    return 0.5 * (Sig + Sig.T)


def sample_restricted_inverse_wishart(nu_hat: float, S_hat, rng) -> np.ndarray:
    """IW(nu_hat, S_hat) draw conditioned on element (1,1) = 1.

    Swap row/column 1 and d of the scale, build a Bartlett-type lower
    triangle whose last diagonal entry is 1/l_dd (l_dd from the Cholesky
    factor of the inverted swapped scale), invert, swap back. The swapped
    (d,d) entry, the original (1,1), then equals 1 identically.
    """
    S_hat = np.asarray(S_hat, dtype=float)
    d = S_hat.shape[0]
    if nu_hat <= d - 1:
        raise ValueError("degrees of freedom must exceed d-1")
    perm = np.arange(d)
    perm[0], perm[-1] = perm[-1], perm[0]
    Sp = S_hat[np.ix_(perm, perm)]
    cf = sla.cho_factor(0.5 * (Sp + Sp.T), lower=True)
    Sp_inv = sla.cho_solve(cf, np.eye(d))
    L = _chol(Sp_inv, "inverted scale")
    Delta = np.zeros((d, d))
    for i in range(d - 1):
        Delta[i, i] = np.sqrt(rng.gamma((nu_hat - i) / 2.0, 2.0))
    Delta[d - 1, d - 1] = 1.0 / L[d - 1, d - 1]
    if d > 1:
        idx = np.tril_indices(d, -1)
        Delta[idx] = rng.standard_normal(len(idx[0]))
    # Sigma_p = ((L Delta)(L Delta)')^{-1}
    Minv = sla.solve_triangular(L @ Delta, np.eye(d), lower=True)
    Sig_p = Minv.T @ Minv
    Sig = Sig_p[np.ix_(perm, perm)]
    Sig = 0.5 * (Sig + Sig.T)
    Sig[0, 0] = 1.0
    return Sig


def sample_truncated_normal(mu, var, lo=-1.0, hi=1.0, rng=None):
    """Draw from N(mu, var) restricted to (lo, hi); scalar or elementwise.

    scipy's truncnorm handles the far-tail cases through one-sided
    exponential-tail sampling internally; an interval whose standardized
    bounds both exceed the double-precision tail range is rejected.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    if not lo < hi:
        raise ValueError("empty truncation interval")
    sd = np.sqrt(var)
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    if np.any(a > 38.0) or np.any(b < -38.0):
        raise DegenerateTruncationError("interval mass underflows")
    out = truncnorm.rvs(a, b, loc=mu, scale=sd, random_state=rng)
    return out if out.shape else float(out)


def truncated_normal_logpdf(x, mu, var, lo=-1.0, hi=1.0):
    sd = np.sqrt(var)
    return truncnorm.logpdf(x, (lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd)


def sample_inverse_gamma(shape, scale, rng, size=None):
    """IG(shape, scale) draw(s); reciprocal is Gamma(shape, rate=scale)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise ValueError("shape and scale must be positive")
    g = rng.gamma(shape, 1.0, size=size)
    out = scale / g
    return out if np.ndim(out) else float(out)


def inverse_gamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(x) - scale / x


def inverse_wishart_logpdf(X, nu: float, S) -> np.ndarray:
    """log IW(nu, S) density, batched over leading axes of X.

    Non-SPD inputs (negative determinant) get -inf rather than an error so
    importance weights can zero them out.
    """
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    X = np.asarray(X, dtype=float)
    batch_shape = X.shape[:-2]
    Xb = X.reshape((-1, d, d))
    _, ld_S = np.linalg.slogdet(S)
    sign_X, ld_X = np.linalg.slogdet(Xb)
    tr = np.trace(np.linalg.solve(Xb, np.broadcast_to(S, Xb.shape)),
                  axis1=-2, axis2=-1)
    out = (0.5 * nu * ld_S - 0.5 * nu * d * np.log(2.0) - multigammaln(0.5 * nu, d)
           - 0.5 * (nu + d + 1) * ld_X - 0.5 * tr)
    out = np.where(sign_X > 0, out, -np.inf)
    return out.reshape(batch_shape) if batch_shape else float(out[0])


# ---------------------------------------------------------------------------
# maximum-likelihood fitters
# ---------------------------------------------------------------------------

def _multi_digamma(x: float, d: int) -> float:
    return float(np.sum(digamma(x + (1.0 - np.arange(1, d + 1)) / 2.0)))


def _multi_trigamma(x: float, d: int) -> float:
    return float(np.sum(polygamma(1, x + (1.0 - np.arange(1, d + 1)) / 2.0)))


def mle_wishart(samples, tol: float = 1e-8, max_iter: int = 200) -> WishartFit:
    """Fit W(delta, psi) to SPD samples by profiled Newton on delta.

    With psi profiled out (psi_hat = mean(K)/delta) the stationarity
    condition in delta is
        d*log(delta) - d*log 2 - log|mean(K)| + mean(log|K|) - psi_d(delta/2) = 0,
    psi_d the multivariate digamma. Safeguarded Newton with a bisection
    bracket, initialized from the scalar-Gamma closed-form heuristic.
    """
    K = np.asarray(samples, dtype=float)
    if K.ndim != 3 or K.shape[0] < 2:
        raise ValueError("need at least two d x d samples")
    d = K.shape[1]
    signs, logdets = np.linalg.slogdet(K)
    if np.any(signs <= 0):
        raise ValueError("samples must be symmetric positive definite")
    S_bar = K.mean(axis=0)
    sign_b, logdet_bar = np.linalg.slogdet(S_bar)
    if sign_b <= 0:
        raise ValueError("sample mean is not positive definite")
    L_bar = float(logdets.mean())

    def g(delta):
        return (d * np.log(delta) - d * np.log(2.0) - logdet_bar + L_bar
                - _multi_digamma(delta / 2.0, d))

    def gprime(delta):
        return d / delta - 0.5 * _multi_trigamma(delta / 2.0, d)

    # scalar-Gamma-style initial guess from the per-dimension log gap
    s = max((logdet_bar - L_bar) / d, 1e-12)
    alpha0 = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    delta = float(np.clip(d - 1.0 + 2.0 * alpha0, d - 1.0 + 1e-6, 1e6))

    lo = d - 1.0 + 1e-9
    hi = max(2.0 * delta, d + 1.0)
    while g(hi) > 0 and hi < 1e6:
        hi *= 2.0
    hi = min(hi, 1e6)
    converged = False
    it = 0
    gd = g(delta)
    for it in range(1, max_iter + 1):
        gd = g(delta)
        if abs(gd) < tol:
            converged = True
            break
        if gd > 0:
            lo = delta
        else:
            hi = delta
        step = gd / gprime(delta)
        cand = delta - step
        if not (lo < cand < hi) or not np.isfinite(cand):
            cand = 0.5 * (lo + hi)
        delta = cand
    return WishartFit(delta=float(delta), psi=S_bar / delta,
                      converged=converged, n_iter=it, grad=float(gd))


def mle_inverse_wishart(samples, **kw) -> tuple[float, np.ndarray]:
    """Fit IW(nu, S) by Wishart MLE on the inverted samples.

    Sigma ~ IW(nu, S) iff Sigma^{-1} ~ W(nu, S^{-1}) under this package's
    convention, so the fitted Wishart (delta, psi) maps to
    nu = delta, S = psi^{-1}.
    """
    sig = np.asarray(samples, dtype=float)
    K = np.linalg.inv(sig)
    K = 0.5 * (K + np.swapaxes(K, 1, 2))
    fit = mle_wishart(K, **kw)
    if not fit.converged:
        warnings.warn("inverse-Wishart fit: Newton did not converge "
                      f"(grad={fit.grad:.2e})")
    S = np.linalg.inv(fit.psi)
    return float(fit.delta), 0.5 * (S + S.T)


def mle_inverse_gamma(samples) -> tuple[float, float]:
    """IG(shape, scale) MLE via the Gamma MLE of the reciprocals."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2 or np.any(x <= 0):
        raise ValueError("need >= 2 positive samples")
    z = 1.0 / x
    s = float(np.log(z.mean()) - np.log(z).mean())
    if s < 1e-12:
        warnings.warn("inverse-gamma fit: samples nearly equal, degenerate fit")
        s = 1e-12
    alpha = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    # Newton refinement of log(alpha) - psi(alpha) = s
    for _ in range(50):
        f = np.log(alpha) - digamma(alpha) - s
        fp = 1.0 / alpha - polygamma(1, alpha)
        step = f / fp
        alpha_new = alpha - step
        if alpha_new <= 0:
            alpha_new = alpha / 2.0
        if abs(alpha_new - alpha) < 1e-12 * alpha:
            alpha = alpha_new
            break
        alpha = alpha_new
    scale = alpha / z.mean()
    return float(alpha), float(scale)


def mle_truncated_normal(samples, lo=-1.0, hi=1.0) -> tuple[float, float]:
    """(mu, var) MLE of a normal truncated to (lo, hi)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need >= 2 samples")
    if np.any(x <= lo) or np.any(x >= hi):
        raise ValueError("samples outside truncation support")
    if x.std() < 1e-12:
        warnings.warn("truncated-normal fit: samples nearly equal, degenerate fit")
        return float(x.mean()), 1e-12

    def nll(params):
        mu, log_sd = params
        sd = np.exp(log_sd)
        a, b = (lo - mu) / sd, (hi - mu) / sd
        return -np.sum(truncnorm.logpdf(x, a, b, loc=mu, scale=sd))

    res = minimize(nll, x0=[x.mean(), np.log(max(x.std(), 1e-3))],
                   method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 2000})
    if not res.success:
        warnings.warn(f"truncated-normal fit did not converge: {res.message}")
    mu, log_sd = res.x
    return float(mu), float(np.exp(2.0 * log_sd))


def mle_beta(samples) -> tuple[float, float]:
    """Beta(a, b) MLE on (0,1) samples."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need >= 2 samples")
    if np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("samples must lie in (0,1)")
    if x.std() < 1e-12:
        warnings.warn("beta fit: samples nearly equal, degenerate fit")
        m = float(x.mean())
        # nearly-point-mass beta with matching mean
        return 1e6 * m, 1e6 * (1.0 - m)
    a, b, _, _ = beta_dist.fit(x, floc=0, fscale=1)
    return float(a), float(b)
