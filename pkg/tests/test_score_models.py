"""Tests for the Gaussian oracle priors and exact conditional scores."""

import numpy as np
import pytest
from scipy import stats

from diffusion.schedule import alpha_bar_at, make_linear_schedule
from diffusion.score_models import (
    GaussianPrior,
    GaussianScoreModel,
    ScoreModel,
    exact_gaussian_conditional_score,
    gaussian_analytic_eps,
    gaussian_posterior,
)
from diffusion.operators import selection_matrix


def _fd_gradient(f, x, h=1e-5):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2.0 * h) for e in np.eye(x.size)])


def _random_spd(rng, d):
    m = rng.standard_normal((d, d))
    return m @ m.T / d + 0.5 * np.eye(d)


class TestGaussianPrior:
    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_singular_covariance(self):
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]))

    def test_allow_singular_accepts_psd(self):
        prior = GaussianPrior(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]), allow_singular=True)
        assert np.min(prior.eigvals) >= 0.0

    def test_rejects_wrong_diagonal_length(self):
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(3), np.ones(2))

    def test_sample_moments(self):
        rng = np.random.default_rng(0)
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        prior = GaussianPrior(np.array([1.0, -1.0]), cov)
        x = prior.sample(rng, 100_000)
        np.testing.assert_allclose(x.mean(axis=0), [1.0, -1.0], atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.03)


class TestGaussianAnalyticEps:
    def test_standard_normal_collapse(self):
        """mu = 0, Sigma = I: score = -x_t, so eps_hat = sqrt(1 - abar) x_t."""
        sched = make_linear_schedule()
        prior = GaussianPrior(np.zeros(5), np.ones(5))
        x_t = np.random.default_rng(1).standard_normal(5)
        for t in (1, 100, 200):
            abar = alpha_bar_at(sched, t)
            np.testing.assert_allclose(gaussian_analytic_eps(prior, x_t, t, sched), np.sqrt(1 - abar) * x_t, rtol=1e-12)
            np.testing.assert_allclose(GaussianScoreModel(prior, sched).score(x_t, t), -x_t, rtol=1e-12)

    def test_clean_limit_is_prior_score(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        mean = np.array([1.0, -1.0])
        prior = GaussianPrior(mean, cov)
        x = np.array([0.3, 0.2])
        np.testing.assert_allclose(prior.marginal_score(x, 1.0), -np.linalg.solve(cov, x - mean), rtol=1e-12)

    def test_two_dimensional_finite_differences(self):
        """Sigma = [[2, .5], [.5, 1]], mu = [1, -1], abar = 0.5."""
        sched = make_linear_schedule(1, 0.5, 0.5)
        prior = GaussianPrior(np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        x_t = np.array([0.4, -0.7])
        score = -gaussian_analytic_eps(prior, x_t, 1, sched) / np.sqrt(0.5)
        fd = _fd_gradient(lambda z: prior.marginal_logpdf(z, 0.5), x_t)
        np.testing.assert_allclose(score, fd, rtol=1e-6)

    def test_random_priors_match_finite_differences(self):
        rng = np.random.default_rng(2)
        sched = make_linear_schedule()
        for _ in range(20):
            d = int(rng.integers(1, 9))
            prior = GaussianPrior(rng.standard_normal(d), _random_spd(rng, d))
            t = int(rng.integers(1, 201))
            abar = alpha_bar_at(sched, t)
            x_t = rng.standard_normal(d)
            score = -gaussian_analytic_eps(prior, x_t, t, sched) / np.sqrt(1 - abar)
            fd = _fd_gradient(lambda z: prior.marginal_logpdf(z, abar), x_t)
            np.testing.assert_allclose(score, fd, rtol=1e-6, atol=1e-7)

    def test_diagonal_and_full_modes_agree(self):
        sched = make_linear_schedule()
        variances = np.array([0.5, 1.0, 3.0])
        x_t = np.array([0.1, -2.0, 1.5])
        diag = gaussian_analytic_eps(GaussianPrior(np.ones(3), variances), x_t, 80, sched)
        full = gaussian_analytic_eps(GaussianPrior(np.ones(3), np.diag(variances)), x_t, 80, sched)
        np.testing.assert_allclose(diag, full, rtol=1e-12)

    def test_batched_input(self):
        sched = make_linear_schedule()
        prior = GaussianPrior(np.zeros(4), _random_spd(np.random.default_rng(3), 4))
        x = np.random.default_rng(4).standard_normal((3, 2, 4))
        batched = gaussian_analytic_eps(prior, x, 10, sched)
        assert batched.shape == x.shape
        np.testing.assert_allclose(batched[1, 0], gaussian_analytic_eps(prior, x[1, 0], 10, sched), rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_analytic_eps(GaussianPrior(np.zeros(3), np.ones(3)), np.zeros(4), 5, make_linear_schedule())

    def test_score_model_protocol(self):
        model = GaussianScoreModel(GaussianPrior(np.zeros(2), np.ones(2)), make_linear_schedule())
        assert isinstance(model, ScoreModel)


class TestExactConditionalScore:
    def test_identity_operator_collapses_to_observation(self):
        sched = make_linear_schedule()
        rng = np.random.default_rng(5)
        prior = GaussianPrior(np.zeros(3), _random_spd(rng, 3))
        y = rng.standard_normal(3)
        x_t = rng.standard_normal(3)
        abar = alpha_bar_at(sched, 50)
        score = exact_gaussian_conditional_score(prior, np.eye(3), y, x_t, 50, sched)
        np.testing.assert_allclose(score, -(x_t - np.sqrt(abar) * y) / (1 - abar), rtol=1e-8, atol=1e-10)

    def test_selection_operator_matches_finite_differences(self):
        sched = make_linear_schedule()
        rng = np.random.default_rng(6)
        prior = GaussianPrior(rng.standard_normal(4), _random_spd(rng, 4))
        matrix = selection_matrix(4, [0, 2])
        y = np.array([0.5, -0.3])
        t = 120
        abar = alpha_bar_at(sched, t)

        posterior = gaussian_posterior(prior, matrix, y)
        cov = abar * posterior.cov_matrix + (1 - abar) * np.eye(4)
        density = stats.multivariate_normal(mean=np.sqrt(abar) * posterior.mean, cov=cov)

        x_t = rng.standard_normal(4)
        score = exact_gaussian_conditional_score(prior, matrix, y, x_t, t, sched)
        np.testing.assert_allclose(score, _fd_gradient(density.logpdf, x_t), rtol=1e-6, atol=1e-9)

    def test_posterior_honours_observation(self):
        rng = np.random.default_rng(7)
        prior = GaussianPrior(np.zeros(6), _random_spd(rng, 6))
        matrix = selection_matrix(6, [1, 4])
        y = np.array([1.0, -2.0])
        posterior = gaussian_posterior(prior, matrix, y)
        np.testing.assert_allclose(matrix @ posterior.mean, y, atol=1e-10)
        np.testing.assert_allclose(matrix @ posterior.cov_matrix @ matrix.T, 0.0, atol=1e-10)

    def test_rank_deficient_operator(self):
        prior = GaussianPrior(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            gaussian_posterior(prior, np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), np.zeros(2))

    def test_step_zero_rejected(self):
        prior = GaussianPrior(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            exact_gaussian_conditional_score(prior, np.eye(2), np.zeros(2), np.zeros(2), 0, make_linear_schedule())
