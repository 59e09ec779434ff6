"""Sampler step oracles and chain-driver behavior.

Each conditional draw is checked against an independently coded dense
oracle (Bayesian GLS formulas, grid posteriors, or exact distributions)
before any end-to-end claims are made.
"""

import dataclasses

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.stats as st

from matrixdfm.gibbs import (
    ChainError,
    McmcConfig,
    PosteriorStore,
    ar_prior_precision_banded,
    factor_posterior_banded,
    geweke_table,
    geweke_z,
    initial_chain_state,
    loadings_col_posterior,
    loadings_row_posterior,
    run_chain,
    step_factors,
    step_lambda,
    step_rho,
)
from matrixdfm.model import (
    FactorDynamics,
    FactorPath,
    IdioCov,
    Loadings,
    ModelSpec,
    default_prior,
    stationary_ok,
    validate_spec,
)
from matrixdfm.volatility import omega_path


def _rand_spd(rng, d, scale=1.0):
    M = rng.standard_normal((d, d))
    return scale * (M @ M.T / d + np.eye(d))


def _spec(n=4, k=3, T=6, p1=2, p2=2, q=1, **kw):
    return ModelSpec(n=n, k=k, T=T, p1=p1, p2=p2, q=q, **kw)


def _banded_to_dense(ab):
    """Expand lower-banded storage (ab[d, j] = M[j+d, j]) to a full matrix."""
    bw, m = ab.shape[0] - 1, ab.shape[1]
    M = np.zeros((m, m))
    for d in range(bw + 1):
        idx = np.arange(m - d)
        M[idx + d, idx] = ab[d, : m - d]
    return M + np.tril(M, -1).T


# ---------------------------------------------------------------------------
# loadings posteriors
# ---------------------------------------------------------------------------


class TestLoadingsPosteriors:
    def _nontrivial_prior(self, spec, rng):
        prior = default_prior(spec)
        return dataclasses.replace(
            prior,
            A0=rng.standard_normal((spec.n, spec.p1)),
            V_A=_rand_spd(rng, spec.p1),
            B0=rng.standard_normal((spec.k, spec.p2)),
            V_B=_rand_spd(rng, spec.p2),
            S_r=_rand_spd(rng, spec.n),
            S_c=_rand_spd(rng, spec.k),
        )

    def test_zero_data_row_posterior_equals_prior(self):
        # T = 0: every data sum is empty, so the conjugate update must
        # return the prior hyperparameters untouched.
        rng = np.random.default_rng(0)
        spec = _spec(T=6)
        prior = self._nontrivial_prior(spec, rng)
        Y = np.zeros((0, spec.n, spec.k))
        F = np.zeros((0, spec.p1, spec.p2))
        w = np.zeros(0)
        B = rng.standard_normal((spec.k, spec.p2))
        sigma_c = _rand_spd(rng, spec.k)
        K_A, Ahat_T, nu_hat, S_hat = loadings_row_posterior(prior, Y, B, sigma_c, F, w)
        np.testing.assert_allclose(K_A, np.linalg.inv(prior.V_A), rtol=1e-10)
        np.testing.assert_allclose(Ahat_T, prior.A0.T, rtol=1e-9, atol=1e-12)
        assert nu_hat == prior.nu_r
        np.testing.assert_allclose(S_hat, prior.S_r, rtol=1e-9, atol=1e-10)

    def test_zero_data_col_posterior_equals_prior(self):
        rng = np.random.default_rng(1)
        spec = _spec(T=6)
        prior = self._nontrivial_prior(spec, rng)
        Y = np.zeros((0, spec.n, spec.k))
        F = np.zeros((0, spec.p1, spec.p2))
        w = np.zeros(0)
        A = rng.standard_normal((spec.n, spec.p1))
        sigma_r = _rand_spd(rng, spec.n)
        K_B, Bhat_T, nu_hat, S_hat = loadings_col_posterior(prior, Y, A, sigma_r, F, w)
        np.testing.assert_allclose(K_B, np.linalg.inv(prior.V_B), rtol=1e-10)
        np.testing.assert_allclose(Bhat_T, prior.B0.T, rtol=1e-9, atol=1e-12)
        assert nu_hat == prior.nu_c
        np.testing.assert_allclose(S_hat, prior.S_c, rtol=1e-9, atol=1e-10)

    def test_row_posterior_matches_dense_gls(self):
        # Dense oracle: vec(Y_t') = (I_n x B F_t') vec(A') + vec(E_t'),
        # vec(E_t') ~ N(0, w_t^-1 Sigma_r x Sigma_c), prior
        # vec(A') ~ N(vec(A0'), Sigma_r x V_A).  Standard GLS algebra gives
        # posterior precision Sigma_r^-1 x K_A and mean vec(Ahat_T).
        rng = np.random.default_rng(2)
        spec = _spec(n=4, k=3, T=5, p1=2, p2=2)
        prior = self._nontrivial_prior(spec, rng)
        Y = rng.standard_normal((spec.T, spec.n, spec.k))
        F = rng.standard_normal((spec.T, spec.p1, spec.p2))
        w = rng.uniform(0.5, 2.0, spec.T)
        B = rng.standard_normal((spec.k, spec.p2))
        sigma_c = _rand_spd(rng, spec.k)
        sigma_r = _rand_spd(rng, spec.n)

        K_A, Ahat_T, _, _ = loadings_row_posterior(prior, Y, B, sigma_c, F, w)

        Sr_inv = np.linalg.inv(sigma_r)
        Sc_inv = np.linalg.inv(sigma_c)
        P0 = np.kron(Sr_inv, np.linalg.inv(prior.V_A))
        prec = P0.copy()
        rhs = P0 @ prior.A0.T.reshape(-1, order="F")
        for t in range(spec.T):
            X = np.kron(np.eye(spec.n), B @ F[t].T)
            Oinv = w[t] * np.kron(Sr_inv, Sc_inv)
            prec += X.T @ Oinv @ X
            rhs += X.T @ Oinv @ Y[t].T.reshape(-1, order="F")
        mean = np.linalg.solve(prec, rhs)

        np.testing.assert_allclose(Ahat_T.reshape(-1, order="F"), mean, rtol=1e-8)
        np.testing.assert_allclose(prec, np.kron(Sr_inv, K_A), rtol=1e-8)

    def test_row_scale_matrix_matches_residual_form(self):
        # Completing the square: S_hat - S_r equals the weighted residual
        # quadratic at the posterior mean plus the prior deviation term.
        rng = np.random.default_rng(3)
        spec = _spec(n=4, k=3, T=7, p1=2, p2=1)
        prior = self._nontrivial_prior(spec, rng)
        Y = rng.standard_normal((spec.T, spec.n, spec.k))
        F = rng.standard_normal((spec.T, spec.p1, spec.p2))
        w = rng.uniform(0.5, 2.0, spec.T)
        B = rng.standard_normal((spec.k, spec.p2))
        sigma_c = _rand_spd(rng, spec.k)
        K_A, Ahat_T, _, S_hat = loadings_row_posterior(prior, Y, B, sigma_c, F, w)

        Ahat = Ahat_T.T
        Sc_inv = np.linalg.inv(sigma_c)
        E = Y - np.einsum("ij,tjk,lk->til", Ahat, F, B)
        resid = np.einsum("t,tij,jk,tlk->il", w, E, Sc_inv, E)
        dev = Ahat - prior.A0
        resid += dev @ np.linalg.inv(prior.V_A) @ dev.T
        np.testing.assert_allclose(S_hat - prior.S_r, resid, rtol=1e-7, atol=1e-9)

    def test_col_posterior_is_row_posterior_of_transposed_problem(self):
        # Transposing every observation swaps the two loading roles; the
        # column update must equal the row update on the flipped problem.
        rng = np.random.default_rng(4)
        spec = _spec(n=4, k=3, T=5, p1=2, p2=2)
        prior = self._nontrivial_prior(spec, rng)
        Y = rng.standard_normal((spec.T, spec.n, spec.k))
        F = rng.standard_normal((spec.T, spec.p1, spec.p2))
        w = rng.uniform(0.5, 2.0, spec.T)
        A = rng.standard_normal((spec.n, spec.p1))
        sigma_r = _rand_spd(rng, spec.n)

        K_B, Bhat_T, nu_hat, S_hat = loadings_col_posterior(prior, Y, A, sigma_r, F, w)

        swapped = dataclasses.replace(
            prior, A0=prior.B0, V_A=prior.V_B, nu_r=prior.nu_c, S_r=prior.S_c,
            B0=prior.A0, V_B=prior.V_A, nu_c=prior.nu_r, S_c=prior.S_r)
        K2, Bhat2, nu2, S2 = loadings_row_posterior(
            swapped, Y.transpose(0, 2, 1), A, sigma_r, F.transpose(0, 2, 1), w)
        np.testing.assert_allclose(K_B, K2, rtol=1e-12)
        np.testing.assert_allclose(Bhat_T, Bhat2, rtol=1e-12)
        assert nu_hat == nu2
        np.testing.assert_allclose(S_hat, S2, rtol=1e-12)


# ---------------------------------------------------------------------------
# factor path
# ---------------------------------------------------------------------------


def _dense_factor_prior_precision(dynamics, T, pf, q):
    """Per-series AR precision H' D^-1 H interleaved at stride pf."""
    P = np.zeros((T * pf, T * pf))
    for j in range(pf):
        H = np.eye(T)
        for t in range(q, T):
            for lag in range(1, q + 1):
                H[t, t - lag] = -dynamics.rho[j, lag - 1]
        var = np.full(T, dynamics.lambda2[j])
        var[:q] = dynamics.lambda2[j] / (1.0 - np.sum(dynamics.rho[j] ** 2))
        Pj = H.T @ np.diag(1.0 / var) @ H
        idx = j + pf * np.arange(T)
        P[np.ix_(idx, idx)] += Pj
    return P


class TestFactorStep:
    def test_banded_posterior_matches_dense_oracle(self):
        # n=k=2, single factor: conditioning the dense joint Gaussian gives
        # the same mean and precision as the banded assembly.
        rng = np.random.default_rng(5)
        spec = _spec(n=2, k=2, T=3, p1=1, p2=1)
        loadings = Loadings(A=np.ones((2, 1)) * [[1.0], [0.7]],
                            B=np.array([[1.0], [-0.4]]))
        idio = IdioCov(sigma_r=_rand_spd(rng, 2), sigma_c=_rand_spd(rng, 2))
        dynamics = FactorDynamics(rho=np.array([[0.6]]), lambda2=np.array([0.8]))
        Y = rng.standard_normal((3, 2, 2))
        w = rng.uniform(0.5, 2.0, 3)

        K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
        K = _banded_to_dense(K_ab)

        P = _dense_factor_prior_precision(dynamics, 3, 1, 1)
        Sr_inv = np.linalg.inv(idio.sigma_r)
        Sc_inv = np.linalg.inv(idio.sigma_c)
        G = np.kron(loadings.B.T @ Sc_inv @ loadings.B,
                    loadings.A.T @ Sr_inv @ loadings.A)
        b_ref = np.zeros(3)
        for t in range(3):
            P[t, t] += w[t] * G[0, 0]
            M = loadings.A.T @ Sr_inv @ Y[t] @ Sc_inv @ loadings.B
            b_ref[t] = w[t] * M[0, 0]
        np.testing.assert_allclose(K, P, rtol=1e-8)
        np.testing.assert_allclose(b, b_ref, rtol=1e-8)
        # posterior mean via both routes
        np.testing.assert_allclose(np.linalg.solve(K, b), np.linalg.solve(P, b_ref),
                                   rtol=1e-8)

    def test_banded_posterior_matches_dense_oracle_multi_factor(self):
        # pf = 2 with q = 2 exercises the interleaved band assembly (AR terms
        # at offsets lag*pf, cross-factor couplings inside each period).
        rng = np.random.default_rng(6)
        spec = _spec(n=3, k=3, T=5, p1=2, p2=1, q=2)
        A = np.vstack([np.tril(np.ones((2, 2)), -1) + np.eye(2),
                       rng.standard_normal((1, 2))])
        B = np.vstack([[1.0], rng.standard_normal((2, 1))])
        loadings = Loadings(A=A, B=B)
        idio = IdioCov(sigma_r=_rand_spd(rng, 3), sigma_c=_rand_spd(rng, 3))
        dynamics = FactorDynamics(rho=np.array([[0.5, 0.2], [-0.3, 0.1]]),
                                  lambda2=np.array([0.7, 1.3]))
        Y = rng.standard_normal((5, 3, 3))
        w = rng.uniform(0.5, 2.0, 5)

        K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
        K = _banded_to_dense(K_ab)

        pf = 2
        P = _dense_factor_prior_precision(dynamics, 5, pf, 2)
        Sr_inv = np.linalg.inv(idio.sigma_r)
        Sc_inv = np.linalg.inv(idio.sigma_c)
        G = np.kron(B.T @ Sc_inv @ B, A.T @ Sr_inv @ A)
        b_ref = np.zeros(5 * pf)
        for t in range(5):
            sl = slice(t * pf, (t + 1) * pf)
            P[sl, sl] += w[t] * G
            M = A.T @ Sr_inv @ Y[t] @ Sc_inv @ B
            b_ref[sl] = w[t] * M.reshape(-1, order="F")
        np.testing.assert_allclose(K, P, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(b, b_ref, rtol=1e-8)

    def test_joint_draw_moments_match_dense_posterior(self):
        rng = np.random.default_rng(7)
        spec = _spec(n=2, k=2, T=3, p1=1, p2=1)
        loadings = Loadings(A=np.array([[1.0], [0.5]]), B=np.array([[1.0], [0.8]]))
        idio = IdioCov(sigma_r=np.eye(2), sigma_c=np.eye(2))
        dynamics = FactorDynamics(rho=np.array([[0.7]]), lambda2=np.array([1.0]))
        Y = rng.standard_normal((3, 2, 2))
        w = np.ones(3)
        K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
        K = _banded_to_dense(K_ab)
        mean = np.linalg.solve(K, b)
        cov = np.linalg.inv(K)

        draws = np.array([step_factors(spec, loadings, idio, dynamics, Y, w, rng).f
                          for _ in range(20000)]).reshape(20000, -1)
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=4e-2)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=5e-2)

    def test_prior_dominated_limit_centers_path_at_zero(self):
        # omega -> 1e12 wipes out the observation information, so the
        # conditional mean collapses to the AR prior mean of zero.
        rng = np.random.default_rng(8)
        spec = _spec(n=3, k=3, T=12, p1=1, p2=1)
        loadings = Loadings(A=np.vstack([[1.0], rng.standard_normal((2, 1))]),
                            B=np.vstack([[1.0], rng.standard_normal((2, 1))]))
        idio = IdioCov(sigma_r=np.eye(3), sigma_c=np.eye(3))
        dynamics = FactorDynamics(rho=np.array([[0.6]]), lambda2=np.array([1.0]))
        Y = 5.0 + rng.standard_normal((12, 3, 3))
        w = np.full(12, 1e-12)  # 1/omega with omega = 1e12
        K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
        mean = np.linalg.solve(_banded_to_dense(K_ab), b)
        assert np.max(np.abs(mean)) < 1e-4

    def test_precision_is_spd_under_random_draws(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            spec = _spec(n=3, k=2, T=7, p1=2, p2=2, q=1)
            A = np.vstack([np.eye(2), rng.standard_normal((1, 2))])
            B = np.vstack([np.eye(2)])
            loadings = Loadings(A=A, B=B)
            idio = IdioCov(sigma_r=_rand_spd(rng, 3), sigma_c=_rand_spd(rng, 2))
            rho = rng.uniform(-0.9, 0.9, (4, 1))
            dynamics = FactorDynamics(rho=rho, lambda2=rng.uniform(0.2, 3.0, 4))
            Y = rng.standard_normal((7, 3, 2))
            w = rng.uniform(0.1, 5.0, 7)
            K_ab, _ = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
            K = _banded_to_dense(K_ab)
            assert np.all(np.linalg.eigvalsh(K) > 0)

    def test_per_period_sampler_is_exact_at_single_period(self):
        # With T = 1 and rho = 0 there is no future to condition on, so the
        # one-period recursion and the joint draw target the same Gaussian.
        rng = np.random.default_rng(10)
        spec = _spec(n=3, k=2, T=1, p1=1, p2=1)
        loadings = Loadings(A=np.vstack([[1.0], rng.standard_normal((2, 1))]),
                            B=np.array([[1.0], [0.5]]))
        idio = IdioCov(sigma_r=np.eye(3), sigma_c=np.eye(2))
        dynamics = FactorDynamics(rho=np.array([[0.0]]), lambda2=np.array([0.9]))
        Y = rng.standard_normal((1, 3, 2))
        w = np.array([1.3])
        K_ab, b = factor_posterior_banded(spec, loadings, idio, dynamics, Y, w)
        mean = b / K_ab[0, 0]
        var = 1.0 / K_ab[0, 0]
        draws = np.array([
            step_factors(spec, loadings, idio, dynamics, Y, w, rng, mode="per-t").f[0, 0]
            for _ in range(20000)])
        assert abs(draws.mean() - mean[0]) < 4 * np.sqrt(var / 20000) + 1e-3
        assert abs(draws.var() / var - 1.0) < 0.05

    def test_ar_prior_band_matches_dense(self):
        rho = np.array([0.5, -0.3])
        ab = ar_prior_precision_banded(rho, 0.7, 6)
        dyn = FactorDynamics(rho=rho[None, :], lambda2=np.array([0.7]))
        dense = _dense_factor_prior_precision(dyn, 6, 1, 2)
        np.testing.assert_allclose(_banded_to_dense(ab), dense, rtol=1e-12)


# ---------------------------------------------------------------------------
# innovation variances and AR coefficients
# ---------------------------------------------------------------------------


class TestDynamicsSteps:
    def test_lambda_zero_path_reduces_to_prior_scale(self):
        # f = 0 kills every residual term: draws must follow
        # IG(nu_lambda + T/2, s_lambda) exactly.
        spec = _spec(n=3, k=2, T=20, p1=1, p2=1)
        prior = default_prior(spec)
        f = np.zeros((spec.T, 1))
        rho = np.array([[0.5]])
        rng = np.random.default_rng(11)
        draws = np.array([step_lambda(spec, prior, f, rho, rng)[0]
                          for _ in range(4000)])
        ks = st.kstest(draws, st.invgamma(a=prior.nu_lambda + spec.T / 2,
                                          scale=prior.s_lambda).cdf)
        assert ks.pvalue > 1e-3
        assert np.all(draws > 0)

    def test_lambda_three_point_hand_scale(self):
        # T = 3, q = 1: scale = s + (f1^2 (1-rho^2) + (f2-rho f1)^2
        # + (f3-rho f2)^2) / 2, shape = nu + 3/2.
        spec = _spec(n=3, k=2, T=3, p1=1, p2=1)
        prior = default_prior(spec)
        f = np.array([[0.4], [-1.1], [0.9]])
        rho = np.array([[0.6]])
        hand = prior.s_lambda + 0.5 * (
            0.4 ** 2 * (1 - 0.36)
            + (-1.1 - 0.6 * 0.4) ** 2
            + (0.9 - 0.6 * -1.1) ** 2)
        rng = np.random.default_rng(12)
        draws = np.array([step_lambda(spec, prior, f, rho, rng)[0]
                          for _ in range(4000)])
        ks = st.kstest(draws, st.invgamma(a=prior.nu_lambda + 1.5, scale=hand).cdf)
        assert ks.pvalue > 1e-3

    def test_lambda_unit_scale_mode_returns_ones(self):
        spec = _spec(n=3, k=2, T=10, p1=2, p2=1, factor_scale="unit")
        prior = default_prior(spec)
        rng = np.random.default_rng(13)
        f = rng.standard_normal((10, 2))
        out = step_lambda(spec, prior, f, np.full((2, 1), 0.5), rng)
        np.testing.assert_array_equal(out, np.ones(2))

    def test_rho_draws_stay_stationary_and_flags_match(self):
        rng = np.random.default_rng(14)
        spec = _spec(n=3, k=2, T=40, p1=2, p2=1, q=2)
        prior = default_prior(spec)
        f = rng.standard_normal((40, 2))
        rho = np.array([[0.3, 0.1], [0.0, 0.0]])
        lam2 = np.array([1.0, 0.5])
        for _ in range(200):
            rho_new, acc = step_rho(spec, prior, f, lam2, rho, rng)
            for j in range(2):
                assert stationary_ok(rho_new[j])
                if not acc[j]:
                    np.testing.assert_array_equal(rho_new[j], rho[j])
                else:
                    assert not np.array_equal(rho_new[j], rho[j])
            rho = rho_new

    def test_rho_degenerate_proposal_always_accepts(self):
        # With a near-point-mass prior at the current value the proposal
        # equals the state, so the acceptance ratio is 1 up to rounding.
        spec = _spec(n=3, k=2, T=30, p1=1, p2=1)
        prior = dataclasses.replace(default_prior(spec), rho0=0.5, v_rho=1e-18)
        rng = np.random.default_rng(15)
        f = np.concatenate([np.zeros((1, 1)),
                            rng.standard_normal((29, 1))])  # head term = 0
        rho = np.array([[0.5]])
        n_acc = 0
        for _ in range(500):
            rho_new, acc = step_rho(spec, prior, f, np.array([1.0]), rho, rng)
            n_acc += int(acc[0])
            assert abs(rho_new[0, 0] - 0.5) < 1e-6
        assert n_acc == 500

    def test_rho_mh_matches_grid_posterior(self):
        # q = 1 on a short fixed path: the exact conditional density over
        # (-1, 1) is computable on a grid; the MH chain's histogram must
        # agree in total variation after 1e5 draws.
        rng = np.random.default_rng(16)
        spec = _spec(n=3, k=2, T=12, p1=1, p2=1)
        prior = default_prior(spec)
        path_rng = np.random.default_rng(99)
        f = np.empty((12, 1))
        f[0, 0] = path_rng.standard_normal()
        for t in range(1, 12):
            f[t, 0] = 0.5 * f[t - 1, 0] + path_rng.standard_normal()
        lam2 = np.array([1.0])

        grid = np.linspace(-0.999, 0.999, 2000)
        logp = (st.norm(prior.rho0, np.sqrt(prior.v_rho)).logpdf(grid)
                + st.norm(0.0, np.sqrt(lam2[0] / (1 - grid ** 2))).logpdf(f[0, 0]))
        for t in range(1, 12):
            logp += st.norm(grid * f[t - 1, 0], np.sqrt(lam2[0])).logpdf(f[t, 0])
        p_grid = np.exp(logp - logp.max())
        p_grid /= p_grid.sum()

        rho = np.array([[0.0]])
        n_mh = 100_000
        draws = np.empty(n_mh)
        for i in range(n_mh):
            rho, _ = step_rho(spec, prior, f, lam2, rho, rng)
            draws[i] = rho[0, 0]

        edges = np.linspace(-0.999, 0.999, 41)
        hist, _ = np.histogram(draws, bins=edges)
        hist = hist / hist.sum()
        cell = np.digitize(grid, edges) - 1
        ref = np.bincount(cell, weights=p_grid, minlength=40)[:40]
        tv = 0.5 * np.sum(np.abs(hist - ref))
        assert tv < 0.05, f"total variation {tv:.4f}"


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


def _sim_data(spec, seed):
    rng = np.random.default_rng(seed)
    A = np.vstack([np.tril(0.3 * rng.standard_normal((spec.p1, spec.p1)), -1)
                   + np.eye(spec.p1),
                   rng.standard_normal((spec.n - spec.p1, spec.p1))])
    B = np.vstack([np.tril(0.3 * rng.standard_normal((spec.p2, spec.p2)), -1)
                   + np.eye(spec.p2),
                   rng.standard_normal((spec.k - spec.p2, spec.p2))])
    f = np.zeros((spec.T, spec.pf))
    for t in range(1, spec.T):
        f[t] = 0.7 * f[t - 1] + rng.standard_normal(spec.pf)
    F = f.reshape((spec.T, spec.p2, spec.p1)).swapaxes(1, 2)
    Y = np.einsum("ij,tjk,lk->til", A, F, B) + 0.5 * rng.standard_normal(
        (spec.T, spec.n, spec.k))
    return Y


class TestRunChain:
    def test_single_draw_chain_stores_valid_state(self):
        spec = _spec(n=3, k=2, T=8, p1=1, p2=1)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=0, draws=1, seed=3, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 0))
        assert store.n_draws == 1
        state = store.state_at(0)
        assert validate_spec(spec, prior) == []
        assert state.loadings.validate(spec) == []
        assert state.idio.validate(spec) == []
        assert state.dynamics.validate(spec) == []
        path = store.factor_path_at(0)
        assert path.f.shape == (8, 1)
        assert np.all(np.isfinite(path.f))

    def test_same_seed_is_bit_identical(self):
        spec = _spec(n=3, k=3, T=10, p1=1, p2=1)
        prior = default_prior(spec)
        Y = _sim_data(spec, 1)
        cfg = McmcConfig(burn_in=5, draws=5, seed=42, init="prior-draw")
        s1 = run_chain(spec, prior, cfg, Y)
        s2 = run_chain(spec, prior, cfg, Y)
        for name in ("A", "B", "sigma_r", "sigma_c", "rho", "lambda2", "f"):
            np.testing.assert_array_equal(getattr(s1, name), getattr(s2, name))

    @pytest.mark.parametrize("volatility", ["none", "common-sv", "outlier", "fat-tail"])
    @pytest.mark.parametrize("idio", ["kronecker-cross", "exact-diagonal"])
    def test_every_retained_draw_satisfies_invariants(self, volatility, idio):
        spec = _spec(n=4, k=3, T=25, p1=2, p2=1, volatility=volatility, idio=idio)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=10, draws=20, seed=7, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 2))
        assert store.n_draws == 20
        for i in range(store.n_draws):
            state = store.state_at(i)
            assert state.loadings.validate(spec) == []
            assert state.idio.validate(spec) == []
            assert state.dynamics.validate(spec) == []
            assert state.vol.validate(spec) == []
            assert store.sigma_c[i, 0, 0] == 1.0
            w = omega_path(state.vol, spec.T)
            assert np.all(w > 0)
            if idio == "exact-diagonal":
                assert np.allclose(store.sigma_r[i], np.diag(np.diag(store.sigma_r[i])))

    def test_thinning_and_store_shapes(self):
        spec = _spec(n=3, k=2, T=12, p1=1, p2=1)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=4, draws=6, thin=3, seed=0, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 3))
        assert store.A.shape == (6, 3, 1)
        assert store.f.shape == (6, 12, 1)

    def test_store_save_load_round_trip(self, tmp_path):
        spec = _spec(n=3, k=2, T=10, p1=1, p2=1, volatility="common-sv")
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=3, draws=4, seed=9, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 4))
        store.save(tmp_path / "post")
        back = PosteriorStore.load(tmp_path / "post")
        for name in ("A", "B", "sigma_r", "sigma_c", "rho", "lambda2", "f",
                     "h", "phi", "sigma_h2"):
            np.testing.assert_array_equal(getattr(store, name), getattr(back, name))
        assert back.spec == spec
        assert back.config == cfg
        assert back.geweke == store.geweke
        np.testing.assert_allclose(back.prior.S_r, prior.S_r)

    def test_store_factors_off(self):
        spec = _spec(n=3, k=2, T=10, p1=1, p2=1)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=2, draws=3, seed=0, init="prior-draw",
                         store_factors=False)
        store = run_chain(spec, prior, cfg, _sim_data(spec, 5))
        assert store.f is None
        assert store.factor_path_at(0) is None
        with pytest.raises(ValueError):
            store.posterior_mean_factors()

    def test_invalid_configuration_raises(self):
        spec = _spec(n=3, k=2, T=10, p1=1, p2=1)
        prior = default_prior(spec)
        Y = _sim_data(spec, 6)
        with pytest.raises(ValueError, match="shape"):
            run_chain(spec, prior, McmcConfig(init="prior-draw"), Y[:5])
        with pytest.raises(ValueError, match="draws"):
            run_chain(spec, prior, McmcConfig(draws=0, init="prior-draw"), Y)
        with pytest.raises(ValueError, match="init"):
            run_chain(spec, prior, McmcConfig(init="bogus"), Y)
        with pytest.raises(ValueError, match="init_state"):
            run_chain(spec, prior, McmcConfig(init="user-supplied"), Y)

    def test_numerical_breakdown_raises_chain_error(self):
        # A singular column covariance in a user-supplied start state makes
        # the very first loadings update fail; the driver must wrap it with
        # the step name and iteration index.
        spec = _spec(n=3, k=2, T=10, p1=1, p2=1)
        prior = default_prior(spec)
        rng = np.random.default_rng(0)
        cs = initial_chain_state(spec, prior, rng)
        bad = np.zeros((2, 2))
        bad[0, 0] = 1.0
        cs["idio"] = IdioCov(sigma_r=np.eye(3), sigma_c=bad)
        cfg = McmcConfig(burn_in=0, draws=1, init="user-supplied", init_state=cs)
        with pytest.raises(ChainError) as ei:
            run_chain(spec, prior, cfg, _sim_data(spec, 7))
        assert ei.value.step == "loadings_row"
        assert ei.value.iteration == 0

    def test_acceptance_and_timing_metadata(self):
        spec = _spec(n=3, k=2, T=15, p1=1, p2=1, volatility="common-sv")
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=10, draws=10, seed=1, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 8))
        assert len(store.acceptance["rho"]) == 1
        assert 0.0 <= store.acceptance["rho"][0] <= 1.0
        assert 0.0 <= store.acceptance["h"] <= 1.0
        assert set(store.timings) == {"loadings_row", "loadings_col", "factors",
                                      "lambda", "rho", "volatility"}
        assert all(v >= 0 for v in store.timings.values())

    def test_per_t_factor_mode_runs(self):
        spec = _spec(n=3, k=2, T=12, p1=1, p2=1)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=5, draws=5, seed=2, init="prior-draw",
                         factor_step="per-t")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 9))
        assert np.all(np.isfinite(store.f))

    def test_initial_chain_state_is_valid(self):
        for idio in ("kronecker-cross", "exact-diagonal"):
            spec = _spec(n=4, k=3, T=10, p1=2, p2=2, idio=idio)
            prior = default_prior(spec)
            cs = initial_chain_state(spec, prior, np.random.default_rng(0))
            assert cs["loadings"].validate(spec) == []
            assert cs["idio"].validate(spec) == []
            assert cs["dynamics"].validate(spec) == []
            assert cs["vol"].validate(spec) == []
            assert cs["f"].shape == (10, 4)


class TestGeweke:
    def test_iid_chain_scores_small(self):
        rng = np.random.default_rng(17)
        z = [geweke_z(rng.standard_normal(2000)) for _ in range(50)]
        assert np.mean(np.abs(np.array(z)) < 1.96) > 0.8

    def test_trending_chain_scores_large(self):
        x = np.linspace(0, 5, 2000) + 0.1 * np.random.default_rng(18).standard_normal(2000)
        assert abs(geweke_z(x)) > 10

    def test_table_covers_free_parameters(self):
        spec = _spec(n=3, k=2, T=12, p1=1, p2=1)
        prior = default_prior(spec)
        cfg = McmcConfig(burn_in=5, draws=40, seed=4, init="prior-draw")
        store = run_chain(spec, prior, cfg, _sim_data(spec, 10))
        tab = geweke_table(store)
        assert "A[1,0]" in tab and "A[0,0]" not in tab
        assert "rho[0,0]" in tab or any(k.startswith("rho") for k in tab)
        assert all(np.isfinite(v) for v in tab.values())
