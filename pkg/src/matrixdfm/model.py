"""Core types, identification constraints, priors, and model algebra.

The observation model is

    Y_t = A F_t B' + E_t,   vec(E_t) ~ N(0, omega_t * Sigma_c kron Sigma_r),

with Y_t an n x k matrix, A n x p1, F_t p1 x p2, B k x p2, and the latent
factor vector f_t = vec(F_t) following a diagonal AR(q),

    f_t = sum_l diag(rho[:, l]) f_{t-l} + u_t,   u_t ~ N(0, diag(lambda2)).

Identification: the leading p1 x p1 block of A and p2 x p2 block of B are
unit lower triangular (zeros above the diagonal exact, ones on the diagonal),
and sigma_c[0, 0] = 1. vec() is column-major everywhere in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .distributions import LinearConstraint

VOLATILITY_VARIANTS = ("none", "common-sv", "outlier", "fat-tail")
IDIO_MODES = ("kronecker-cross", "exact-diagonal")
FACTOR_SCALES = ("free", "unit")


def vec(M: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v: np.ndarray, p1: int, p2: int) -> np.ndarray:
    return np.asarray(v).reshape((p1, p2), order="F")


def is_spd(a: np.ndarray, sym_tol: float = 1e-10) -> bool:
    """Symmetry to tolerance, then a factorization-success test."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > sym_tol * scale:
        return False
    try:
        np.linalg.cholesky(0.5 * (a + a.T))
        return True
    except np.linalg.LinAlgError:
        return False


def ar_stationary(rho: np.ndarray) -> bool:
    """All roots of 1 - rho_1 z - ... - rho_q z^q outside the unit circle.

    Tested through the reversed polynomial z^q - rho_1 z^{q-1} - ... - rho_q,
    whose roots must lie strictly inside the unit circle; being monic it has
    no leading-coefficient underflow for tiny rho.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if not np.all(np.isfinite(rho)):
        return False
    roots = np.roots(np.concatenate([[1.0], -rho]))
    return bool(np.all(np.abs(roots) < 1.0))


def stationary_ok(rho: np.ndarray) -> bool:
    """Sampler support for one factor's AR coefficients.

    Requires stationarity and sum(rho^2) < 1; the latter keeps the
    stationary initial-condition variance lambda2/(1 - sum rho_m^2)
    positive and is the region the rho step never leaves.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    return float(np.sum(rho ** 2)) < 1.0 and ar_stationary(rho)


@dataclass(frozen=True)
class ModelSpec:
    """Structural description of one model; single source of dimensions."""

    n: int
    k: int
    T: int
    p1: int
    p2: int
    q: int = 1
    volatility: str = "none"
    idio: str = "kronecker-cross"
    factor_scale: str = "free"  # "unit" fixes lambda2 = 1 (alternative scheme)

    @property
    def pf(self) -> int:
        return self.p1 * self.p2

    def validate(self) -> list[str]:
        out = []
        for name in ("n", "k", "T", "p1", "p2", "q"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                out.append(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.n, (int, np.integer)) and isinstance(self.p1, (int, np.integer)):
            if self.n < self.p1:
                out.append(f"n={self.n} < p1={self.p1}: more factor rows than data rows")
        if isinstance(self.k, (int, np.integer)) and isinstance(self.p2, (int, np.integer)):
            if self.k < self.p2:
                out.append(f"k={self.k} < p2={self.p2}: more factor columns than data columns")
        if isinstance(self.T, (int, np.integer)) and isinstance(self.q, (int, np.integer)):
            if self.T <= self.q:
                out.append(f"T={self.T} must exceed the lag order q={self.q}")
        if self.volatility not in VOLATILITY_VARIANTS:
            out.append(f"unknown volatility variant {self.volatility!r}")
        if self.idio not in IDIO_MODES:
            out.append(f"unknown idiosyncratic mode {self.idio!r}")
        if self.factor_scale not in FACTOR_SCALES:
            out.append(f"unknown factor scale mode {self.factor_scale!r}")
        return out


@dataclass(frozen=True)
class Loadings:
    A: np.ndarray  # n x p1
    B: np.ndarray  # k x p2

    def validate(self, spec: ModelSpec) -> list[str]:
        out = []
        if self.A.shape != (spec.n, spec.p1):
            out.append(f"A shape {self.A.shape} != {(spec.n, spec.p1)}")
        if self.B.shape != (spec.k, spec.p2):
            out.append(f"B shape {self.B.shape} != {(spec.k, spec.p2)}")
        if out:
            return out
        for name, M, p in (("A", self.A, spec.p1), ("B", self.B, spec.p2)):
            blk = M[:p, :p]
            if np.any(blk[np.triu_indices(p, 1)] != 0.0):
                out.append(f"{name}: above-diagonal entries of leading block not exactly 0")
            if np.any(np.diag(blk) != 1.0):
                out.append(f"{name}: leading-block diagonal not exactly 1")
            if not np.all(np.isfinite(M)):
                out.append(f"{name}: non-finite entries")
        return out


@dataclass(frozen=True)
class IdioCov:
    sigma_r: np.ndarray  # n x n
    sigma_c: np.ndarray  # k x k

    def validate(self, spec: ModelSpec) -> list[str]:
        out = []
        if self.sigma_r.shape != (spec.n, spec.n):
            out.append(f"sigma_r shape {self.sigma_r.shape} != {(spec.n, spec.n)}")
        elif not is_spd(self.sigma_r):
            out.append("sigma_r not symmetric positive definite")
        if self.sigma_c.shape != (spec.k, spec.k):
            out.append(f"sigma_c shape {self.sigma_c.shape} != {(spec.k, spec.k)}")
        else:
            if not is_spd(self.sigma_c):
                out.append("sigma_c not symmetric positive definite")
            if self.sigma_c[0, 0] != 1.0:
                out.append(f"sigma_c[0,0] = {self.sigma_c[0, 0]!r} != 1 (scale normalization)")
        if spec.idio == "exact-diagonal":
            for name, M in (("sigma_r", self.sigma_r), ("sigma_c", self.sigma_c)):
                if M.ndim == 2 and np.any(M[~np.eye(M.shape[0], dtype=bool)] != 0.0):
                    out.append(f"{name}: off-diagonal entries present in exact-diagonal mode")
        return out


@dataclass(frozen=True)
class FactorDynamics:
    rho: np.ndarray      # (p1*p2) x q
    lambda2: np.ndarray  # (p1*p2,)

    def validate(self, spec: ModelSpec) -> list[str]:
        out = []
        if self.rho.shape != (spec.pf, spec.q):
            out.append(f"rho shape {self.rho.shape} != {(spec.pf, spec.q)}")
        if self.lambda2.shape != (spec.pf,):
            out.append(f"lambda2 shape {self.lambda2.shape} != {(spec.pf,)}")
        if out:
            return out
        for j in range(spec.pf):
            if not stationary_ok(self.rho[j]):
                out.append(f"factor {j}: AR coefficients {self.rho[j]} outside the "
                           "stationary region (or sum of squares >= 1)")
        if np.any(self.lambda2 <= 0):
            out.append("lambda2 must be positive elementwise")
        return out


@dataclass(frozen=True)
class FactorPath:
    """T x (p1*p2) array; row t is the column-major vec of F_t."""

    f: np.ndarray

    def matrices(self, p1: int, p2: int) -> np.ndarray:
        """T x p1 x p2 stack of de-vectorized factor matrices."""
        T = self.f.shape[0]
        return self.f.reshape((T, p2, p1)).swapaxes(1, 2)

    def validate(self, spec: ModelSpec) -> list[str]:
        out = []
        if self.f.shape != (spec.T, spec.pf):
            out.append(f"factor path shape {self.f.shape} != {(spec.T, spec.pf)}")
        elif not np.all(np.isfinite(self.f)):
            out.append("factor path has non-finite entries")
        return out


@dataclass(frozen=True)
class VolatilityState:
    """Variant tag plus exactly the payload that variant needs."""

    variant: str
    h: np.ndarray | None = None        # common-sv: T log-volatilities
    phi: float | None = None
    sigma_h2: float | None = None
    o: np.ndarray | None = None        # outlier: T grid values
    p_o: float | None = None
    q2: np.ndarray | None = None       # fat-tail: T positive scales
    df: float | None = None

    @classmethod
    def none(cls) -> "VolatilityState":
        return cls(variant="none")

    @classmethod
    def common_sv(cls, h, phi, sigma_h2) -> "VolatilityState":
        return cls(variant="common-sv", h=np.asarray(h, dtype=float),
                   phi=float(phi), sigma_h2=float(sigma_h2))

    @classmethod
    def outlier(cls, o, p_o) -> "VolatilityState":
        return cls(variant="outlier", o=np.asarray(o, dtype=float), p_o=float(p_o))

    @classmethod
    def fat_tail(cls, q2, df) -> "VolatilityState":
        return cls(variant="fat-tail", q2=np.asarray(q2, dtype=float), df=float(df))

    def validate(self, spec: ModelSpec, grid=None) -> list[str]:
        out = []
        if self.variant != spec.volatility:
            out.append(f"volatility variant {self.variant!r} != spec {spec.volatility!r}")
        if self.variant == "none":
            pass
        elif self.variant == "common-sv":
            if self.h is None or self.h.shape != (spec.T,):
                out.append("common-sv: h missing or wrong length")
            if self.phi is None or not abs(self.phi) < 1.0:
                out.append("common-sv: |phi| must be < 1")
            if self.sigma_h2 is None or not self.sigma_h2 > 0:
                out.append("common-sv: sigma_h2 must be > 0")
        elif self.variant == "outlier":
            if self.o is None or self.o.shape != (spec.T,):
                out.append("outlier: o missing or wrong length")
            else:
                support = np.arange(1, 21) if grid is None else np.asarray(grid)
                if not np.all(np.isin(self.o, support)):
                    out.append("outlier: o values off the grid")
            if self.p_o is None or not 0.0 < self.p_o < 1.0:
                out.append("outlier: p_o must be in (0,1)")
        elif self.variant == "fat-tail":
            if self.q2 is None or self.q2.shape != (spec.T,):
                out.append("fat-tail: q2 missing or wrong length")
            elif np.any(self.q2 <= 0):
                out.append("fat-tail: q2 must be positive")
            if self.df is None or not self.df > 0:
                out.append("fat-tail: df must be > 0")
        else:
            out.append(f"unknown volatility variant {self.variant!r}")
        return out


@dataclass(frozen=True)
class ParameterState:
    """One full parameter draw (factors held separately in FactorPath)."""

    loadings: Loadings
    idio: IdioCov
    dynamics: FactorDynamics
    vol: VolatilityState

    def validate(self, spec: ModelSpec) -> list[str]:
        return (self.loadings.validate(spec) + self.idio.validate(spec)
                + self.dynamics.validate(spec) + self.vol.validate(spec))


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the natural-conjugate prior family.

    vec(A') | Sigma_r ~ N(vec(A0'), Sigma_r kron V_A)  (A0 stored n x p1),
    Sigma_r ~ IW(nu_r, S_r); mirrored for B/Sigma_c. rho: per-coefficient
    truncated normal N(rho0, v_rho) on (-1,1); lambda2 ~ IG(nu_lambda,
    s_lambda). Volatility hyperpriors: phi truncated normal, sigma_h2
    inverse-gamma, p_o Beta(a_po, b_po), fat-tail df fixed at df_l.
    Under idio mode "exact-diagonal" the implied per-series variance prior
    is the IW marginal of a diagonal element: sigma_ii ~ IG((nu - d + 1)/2,
    S_ii / 2), keeping one PriorConfig valid for both modes.
    """

    nu_r: float
    S_r: np.ndarray
    nu_c: float
    S_c: np.ndarray
    A0: np.ndarray
    V_A: np.ndarray
    B0: np.ndarray
    V_B: np.ndarray
    rho0: float = 0.0
    v_rho: float = 1.0
    nu_lambda: float = 3.0
    s_lambda: float = 2.0
    phi0: float = 0.97
    v_phi: float = 0.01
    nu_h: float = 5.0
    s_h: float = 0.4
    a_po: float = 2.0
    b_po: float = 18.0
    df_l: float = 5.0

    def validate(self, spec: ModelSpec) -> list[str]:
        out = []
        if self.S_r.shape != (spec.n, spec.n) or not is_spd(self.S_r):
            out.append("S_r must be SPD with shape (n, n)")
        if self.S_c.shape != (spec.k, spec.k) or not is_spd(self.S_c):
            out.append("S_c must be SPD with shape (k, k)")
        if not self.nu_r > spec.n + 1:
            out.append(f"nu_r = {self.nu_r} <= n+1 = {spec.n + 1}: improper prior mean")
        if not self.nu_c > spec.k + 1:
            out.append(f"nu_c = {self.nu_c} <= k+1 = {spec.k + 1}: improper prior mean")
        if self.A0.shape != (spec.n, spec.p1):
            out.append(f"A0 shape {self.A0.shape} != {(spec.n, spec.p1)}")
        if self.B0.shape != (spec.k, spec.p2):
            out.append(f"B0 shape {self.B0.shape} != {(spec.k, spec.p2)}")
        if self.V_A.shape != (spec.p1, spec.p1) or not is_spd(self.V_A):
            out.append("V_A must be SPD with shape (p1, p1)")
        if self.V_B.shape != (spec.p2, spec.p2) or not is_spd(self.V_B):
            out.append("V_B must be SPD with shape (p2, p2)")
        for name in ("v_rho", "nu_lambda", "s_lambda", "v_phi", "nu_h", "s_h",
                     "a_po", "b_po", "df_l"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if not abs(self.phi0) < 1:
            out.append("phi0 must lie in (-1,1)")
        return out


def default_prior(spec: ModelSpec) -> PriorConfig:
    """Weakly informative defaults; every value overridable via PriorConfig."""
    return PriorConfig(
        nu_r=spec.n + 4.0, S_r=np.eye(spec.n),
        nu_c=spec.k + 4.0, S_c=np.eye(spec.k),
        A0=np.zeros((spec.n, spec.p1)), V_A=10.0 * np.eye(spec.p1),
        B0=np.zeros((spec.k, spec.p2)), V_B=10.0 * np.eye(spec.p2),
    )


# ---------------------------------------------------------------------------
# model algebra
# ---------------------------------------------------------------------------

def common_component(loadings: Loadings, f_t: np.ndarray) -> np.ndarray:
    """A F_t B' for one period; f_t the column-major vec of F_t.

    Satisfies vec(A F_t B') = (B kron A) vec(F_t).
    """
    A, B = loadings.A, loadings.B
    p1, p2 = A.shape[1], B.shape[1]
    f_t = np.asarray(f_t, dtype=float).reshape(-1)
    if f_t.size != p1 * p2:
        raise ValueError(f"factor vector length {f_t.size} != p1*p2 = {p1 * p2}")
    return A @ unvec(f_t, p1, p2) @ B.T


def enforce_identification(raw_A: np.ndarray, raw_B: np.ndarray) -> Loadings:
    """Strict projection onto the identified set.

    Zeros the above-diagonal entries of each leading square block and sets
    the block diagonals to exactly 1; all other entries pass through.
    """
    A = np.array(raw_A, dtype=float, copy=True)
    B = np.array(raw_B, dtype=float, copy=True)
    for M in (A, B):
        p = M.shape[1]
        if M.shape[0] < p:
            raise ValueError("loading matrix has fewer rows than columns")
        iu = np.triu_indices(p, 1)
        M[:p, :p][iu] = 0.0
        M[np.arange(p), np.arange(p)] = 1.0
    return Loadings(A=A, B=B)


def free_loading_mask(n: int, p: int) -> np.ndarray:
    """Boolean n x p mask of entries not pinned by identification."""
    mask = np.ones((n, p), dtype=bool)
    for i in range(p):
        mask[i, i:] = False
    return mask


def loading_constraint(n: int, p: int) -> LinearConstraint:
    """Pin constraint on vec(A') (A' is p x n, column-major vec).

    Entry A[i, j] sits at vec index i*p + j; pinned entries are the leading
    block's diagonal (to 1) and above-diagonal (to 0).
    """
    idx, vals = [], []
    for i in range(p):
        for j in range(i, p):
            idx.append(i * p + j)
            vals.append(1.0 if i == j else 0.0)
    return LinearConstraint.pins(idx, vals, dim=n * p)


def validate_spec(spec: ModelSpec, prior: PriorConfig | None = None) -> list[str]:
    """All violated constraints (empty list = ok), never just the first."""
    out = spec.validate()
    if prior is not None and not out:
        out += prior.validate(spec)
    return out


def with_factor_scale(dynamics: FactorDynamics, spec: ModelSpec) -> FactorDynamics:
    """Apply the alternative identification: lambda2 pinned to 1."""
    if spec.factor_scale == "unit":
        return replace(dynamics, lambda2=np.ones(spec.pf))
    return dynamics
