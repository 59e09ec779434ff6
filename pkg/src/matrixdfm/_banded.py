"""Symmetric banded-matrix helpers shared by the factor and volatility steps.

Lower banded storage throughout, matching scipy.linalg.cholesky_banded with
lower=True: ab[i, j] = M[i + j, j] for i = 0..bw, so row i holds the i-th
subdiagonal left-aligned.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla


def chol_banded(ab: np.ndarray) -> np.ndarray:
    """Lower banded Cholesky; raises LinAlgError if not positive definite."""
    return sla.cholesky_banded(ab, lower=True)


def solve_banded_spd(cb: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve M x = b given the banded Cholesky of M."""
    return sla.cho_solve_banded((cb, True), b)


def solve_lt_banded(cb: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Solve L' x = z with L the banded lower Cholesky factor cb."""
    bw = cb.shape[0] - 1
    n = cb.shape[1]
    ab = np.zeros((bw + 1, n))
    for dd in range(bw + 1):
        ab[bw - dd, dd:] = cb[dd, : n - dd]
    return sla.solve_banded((0, bw), ab, z)


def logdet_from_chol(cb: np.ndarray) -> float:
    """log|M| from the banded Cholesky of M."""
    return 2.0 * float(np.sum(np.log(cb[0])))


def draw_gaussian_prec_banded(mean: np.ndarray, cb: np.ndarray, rng) -> np.ndarray:
    """Draw N(mean, K^{-1}) given the banded Cholesky cb of the precision K."""
    z = rng.standard_normal(mean.shape[0])
    return mean + solve_lt_banded(cb, z)


def dense_from_banded(ab: np.ndarray) -> np.ndarray:
    """Expand lower banded storage to the full symmetric matrix (tests/small n)."""
    bw = ab.shape[0] - 1
    n = ab.shape[1]
    M = np.zeros((n, n))
    for dd in range(bw + 1):
        idx = np.arange(n - dd)
        M[idx + dd, idx] = ab[dd, : n - dd]
        M[idx, idx + dd] = ab[dd, : n - dd]
    return M


def banded_quad(ab: np.ndarray, x: np.ndarray) -> float:
    """x' M x for M in lower banded storage ab."""
    n = ab.shape[1]
    out = float(np.sum(ab[0] * x * x))
    for dd in range(1, ab.shape[0]):
        out += 2.0 * float(np.sum(ab[dd, : n - dd] * x[dd:] * x[: n - dd]))
    return out
