import numpy as np
import pytest
from scipy import stats

from covreg.errors import DimensionError, ModelInvariantError, RankDeficiencyError
from covreg.gibbs import (
    GibbsState,
    Prior,
    c_conditional,
    default_prior,
    gibbs_step,
    run_chain,
    sample_inverse_wishart,
    sample_matrix_normal,
)
from covreg.model import Dataset, gamma_posterior, sigma_at
from covreg.simulation import SimScenario, generate_dataset
from tests.conftest import random_dataset, random_params


def small_prior(p=2, k=4, nu_extra=6.0):
    nu0 = p + 1 + nu_extra
    return Prior(C0=np.zeros((p, k)), V0=np.eye(k), Psi0=(nu0 - p - 1) * np.eye(p), nu0=nu0)


class TestPrior:
    def test_validation(self):
        with pytest.raises(ValueError):
            Prior(C0=np.zeros((2, 2)), V0=np.eye(2), Psi0=np.eye(2), nu0=3.0)
        with pytest.raises(ModelInvariantError):
            Prior(C0=np.zeros((2, 2)), V0=-np.eye(2), Psi0=np.eye(2), nu0=5.0)
        with pytest.raises(DimensionError):
            Prior(C0=np.zeros((2, 3)), V0=np.eye(2), Psi0=np.eye(2), nu0=5.0)

    def test_default_prior_orthonormal_design(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((100, 2)))
        d = Dataset(Y=rng.standard_normal((100, 2)), X=Q)
        prior = default_prior(d)
        np.testing.assert_allclose(prior.V0[2:, 2:], 100 * np.eye(2), atol=1e-10)
        np.testing.assert_allclose(prior.V0[:2, :2], 100 * np.eye(2), atol=1e-10)
        assert prior.nu0 == 4.0
        np.testing.assert_array_equal(prior.psi_mean, prior.Psi0)
        np.testing.assert_allclose(prior.Psi0, np.cov(d.Y, rowvar=False))

    def test_default_prior_rank_blocks(self, rng):
        P = random_params(rng, q_m=1)
        d = random_dataset(rng, P, 30)
        assert default_prior(d, rank=2).V0.shape == (1 + 2 * 2,) * 2

    def test_singular_design(self, rng):
        X = np.column_stack([np.ones(10), np.ones(10)])
        with pytest.raises(RankDeficiencyError):
            default_prior(Dataset(Y=rng.standard_normal((10, 2)), X=X))

    def test_g_prior_invariance(self, rng):
        # B ~ MN(0, Psi, n (X'X)^-1); rescaling X by F leaves the law of B x unchanged
        n = 50
        X = np.column_stack([np.ones(n), rng.uniform(-1, 1, n)])
        F = np.diag([3.0, 0.2])
        Psi = np.array([[1.0, 0.3], [0.3, 0.5]])
        x = np.array([1.0, 0.7])
        draws, draws_f = [], []
        for _ in range(20000):
            B = sample_matrix_normal(np.zeros((2, 2)), Psi, n * np.linalg.inv(X.T @ X), rng)
            Xf = X @ F
            Bf = sample_matrix_normal(np.zeros((2, 2)), Psi, n * np.linalg.inv(Xf.T @ Xf), rng)
            draws.append(B @ x)
            draws_f.append(Bf @ (F @ x))
        c1, c2 = np.cov(np.array(draws).T), np.cov(np.array(draws_f).T)
        np.testing.assert_allclose(c1, c2, rtol=0.06, atol=0.02)


class TestSamplers:
    def test_inverse_wishart_mean_and_scipy_agreement(self, rng):
        scale = np.array([[2.0, 0.5], [0.5, 1.0]])
        df = 9.0
        ours = np.array([sample_inverse_wishart(scale, df, rng) for _ in range(40000)])
        ref = stats.invwishart(df=df, scale=scale).rvs(40000, random_state=1)
        np.testing.assert_allclose(ours.mean(axis=0), scale / (df - 3), rtol=0.02, atol=0.005)
        np.testing.assert_allclose(ours.var(axis=0), ref.var(axis=0), rtol=0.1)
        assert stats.ks_2samp(ours[:, 0, 1], ref[:, 0, 1]).pvalue > 1e-3

    def test_matrix_normal_covariance(self, rng):
        row = np.array([[1.0, 0.4], [0.4, 2.0]])
        col = np.array([[1.0, -0.3, 0.0], [-0.3, 0.5, 0.1], [0.0, 0.1, 2.0]])
        draws = np.array([sample_matrix_normal(np.zeros((2, 3)), row, col, rng).ravel(order="F") for _ in range(40000)])
        np.testing.assert_allclose(np.cov(draws.T), np.kron(col, row), atol=0.05)


class TestGibbsStep:
    def test_gamma_conditional_matches_posterior(self, rng):
        P = random_params(rng, p=2, q=2)
        d = random_dataset(rng, P, 3)
        prior = small_prior()
        state = GibbsState(C=np.hstack([P.A, P.B]), Psi=P.Psi, gamma=np.zeros((3, 1)))
        g = np.array([gibbs_step(state, d, prior, rng).gamma[:, 0] for _ in range(20000)])
        for i in range(3):
            post = gamma_posterior(P, d.Y[i], d.X[i])
            se = np.sqrt(post.v / len(g))
            assert abs(g[:, i].mean() - post.m) < 4 * se
            assert g[:, i].var() == pytest.approx(post.v, rel=0.05)
            assert 0 < post.v <= 1

    def test_conjugate_regression_when_gamma_zero(self, rng):
        P = random_params(rng, p=2, q=2, q_m=3)
        d = random_dataset(rng, P, 25)
        k = 3 + 2
        prior = Prior(C0=rng.standard_normal((2, k)), V0=2.0 * np.eye(k), Psi0=np.eye(2), nu0=5.0)
        cond = c_conditional(np.zeros((25, 1)), d, prior)
        W = d.W
        V0a_inv = np.eye(3) / 2.0
        Cn_a = (d.Y.T @ W + prior.C0[:, :3] @ V0a_inv) @ np.linalg.inv(W.T @ W + V0a_inv)
        np.testing.assert_allclose(cond.Cn[:, :3], Cn_a, atol=1e-10)
        np.testing.assert_allclose(cond.Cn[:, 3:], prior.C0[:, 3:], atol=1e-10)
        assert cond.nu_n == 5.0 + 25

    def test_empty_data_draws_from_prior(self, rng):
        d = Dataset(Y=np.zeros((0, 2)), X=np.zeros((0, 2)))
        prior = small_prior()
        state = GibbsState(C=np.zeros((2, 4)), Psi=np.eye(2), gamma=np.zeros((0, 1)))
        out = gibbs_step(state, d, prior, rng)
        assert out.gamma.shape == (0, 1)
        np.linalg.cholesky(out.Psi)


class TestRunChain:
    def test_reproducible_and_shapes(self, rng):
        d = generate_dataset(SimScenario(w=1, n=60), rng)
        a = run_chain(d, n_iter=120, burn_in=20, thin=5, seed=3, store_gamma=True)
        b = run_chain(d, n_iter=120, burn_in=20, thin=5, seed=3)
        assert len(a) == (120 - 20) // 5
        assert a.B_draws.shape == (20, 1, 2, 2) and a.gamma_draws.shape == (20, 60, 1)
        np.testing.assert_array_equal(a.B_draws, b.B_draws)
        np.testing.assert_array_equal(a.Psi_draws, b.Psi_draws)
        for Psi in a.Psi_draws:
            np.linalg.cholesky(Psi)

    def test_invalid_lengths(self, rng):
        d = generate_dataset(SimScenario(w=1, n=30), rng)
        with pytest.raises(ValueError):
            run_chain(d, n_iter=10, burn_in=10)
        with pytest.raises(ValueError):
            run_chain(d, n_iter=10, burn_in=0, thin=0)

    def test_prior_dimension_checked(self, rng):
        d = generate_dataset(SimScenario(w=1, n=30), rng)
        with pytest.raises(DimensionError):
            run_chain(d, prior=small_prior(k=6), n_iter=5, burn_in=0)

    def test_summaries_invariant_to_sign_flips(self, rng):
        d = generate_dataset(SimScenario(w=1, n=100), rng)
        draws = run_chain(d, n_iter=300, burn_in=100, seed=1)
        x = np.array([1.0, 0.4])
        before = draws.posterior_mean_sigma(x)
        summ = draws.summary()
        flip = np.where(np.arange(len(draws)) % 2 == 0, -1.0, 1.0)
        draws.B_draws = draws.B_draws * flip[:, None, None, None]
        np.testing.assert_allclose(draws.posterior_mean_sigma(x), before, atol=1e-12)
        np.testing.assert_allclose(draws.summary()["B"]["mean"], summ["B"]["mean"], atol=1e-12)

    def test_rank_two_chain(self, rng):
        d = generate_dataset(SimScenario(w=1, n=80), rng)
        draws = run_chain(d, rank=2, n_iter=60, burn_in=10, seed=0)
        assert draws.B_draws.shape == (50, 2, 2, 2)
        S = draws.sigma_draws([1.0, 0.5])
        P0 = draws.params(0)
        np.testing.assert_allclose(S[0], sigma_at(P0, [1.0, 0.5]))
