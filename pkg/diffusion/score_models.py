"""
Score models: anything that predicts eps_hat(x_t, t).

Provides:
- ScoreModel: the protocol shared by the Gaussian oracle and the trainable denoiser
- GaussianPrior: mean + (diagonal or full) covariance with a cached eigendecomposition
- gaussian_analytic_eps / GaussianScoreModel: exact eps for a Gaussian prior
- gaussian_posterior / exact_gaussian_conditional_score: exact conditioning on a
  noiseless linear observation
"""

import logging
from typing import Optional, Protocol, runtime_checkable

import numpy as np
from scipy import stats

from diffusion.schedule import NoiseSchedule, alpha_bar_at

logger = logging.getLogger(__name__)


@runtime_checkable
class ScoreModel(Protocol):
    """Predicts the injected noise eps for a noisy signal at step t."""

    schedule: NoiseSchedule

    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ...


class GaussianPrior:
    """
    Gaussian N(mean, cov) over vectors of length d.

    `cov` may be a length-d vector (diagonal mode) or a d x d symmetric matrix.
    With allow_singular=True a PSD covariance is accepted (used for posteriors
    of noiseless observations).
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray, allow_singular: bool = False):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        d = self.mean.shape[-1]
        if self.mean.ndim != 1:
            raise ValueError(f"Prior mean must be a vector, got shape {self.mean.shape}")

        if cov.ndim == 1:
            if cov.shape != (d,):
                raise ValueError(f"Diagonal covariance must have length {d}, got {cov.shape}")
            self.diagonal = True
            self.eigvals = cov.copy()
            self.eigvecs = None
        elif cov.shape == (d, d):
            if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise ValueError("Covariance matrix must be symmetric")
            self.diagonal = False
            cov = 0.5 * (cov + cov.T)
            self.eigvals, self.eigvecs = np.linalg.eigh(cov)
        else:
            raise ValueError(f"Covariance must be ({d},) or ({d}, {d}), got {cov.shape}")

        scale = max(float(np.max(np.abs(self.eigvals))), 1e-300)
        if allow_singular:
            if np.min(self.eigvals) < -1e-9 * max(scale, 1.0):
                raise ValueError("Covariance must be positive semi-definite")
            self.eigvals = np.clip(self.eigvals, 0.0, None)
        elif np.min(self.eigvals) <= 1e-12 * scale:
            raise ValueError("Covariance is singular or not positive definite")

        self.cov = cov
        self.dim = d

    @property
    def cov_matrix(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov

    def _apply_inverse(self, v: np.ndarray, diag: np.ndarray) -> np.ndarray:
        """Apply Q diag(1/diag) Q^T to vectors along the last axis."""
        if self.diagonal:
            return v / diag
        return ((v @ self.eigvecs) / diag) @ self.eigvecs.T

    def marginal_score(self, x_t: np.ndarray, abar: float) -> np.ndarray:
        """Score of N(sqrt(abar) mu, abar Sigma + (1 - abar) I) at x_t."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-1] != self.dim:
            raise ValueError(f"Expected vectors of length {self.dim}, got {x_t.shape[-1]}")
        diag = abar * self.eigvals + (1.0 - abar)
        if np.min(diag) <= 0.0:
            raise ValueError("Marginal covariance is singular at this step")
        return -self._apply_inverse(x_t - np.sqrt(abar) * self.mean, diag)

    def marginal_logpdf(self, x_t: np.ndarray, abar: float) -> np.ndarray:
        cov = abar * self.cov_matrix + (1.0 - abar) * np.eye(self.dim)
        return stats.multivariate_normal(mean=np.sqrt(abar) * self.mean, cov=cov).logpdf(x_t)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.diagonal:
            return self.mean + z * np.sqrt(self.eigvals)
        return self.mean + (z * np.sqrt(self.eigvals)) @ self.eigvecs.T


def gaussian_analytic_eps(prior: GaussianPrior, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """
    Exact eps prediction for a Gaussian prior.

    The noisy marginal is N(sqrt(abar) mu, abar Sigma + (1 - abar) I), so
    eps_hat = -sqrt(1 - abar) * score.
    """
    abar = alpha_bar_at(sched, t)
    return -np.sqrt(1.0 - abar) * prior.marginal_score(x_t, abar)


class GaussianScoreModel:
    """ScoreModel backed by an analytic Gaussian prior."""

    def __init__(self, prior: GaussianPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule

    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return gaussian_analytic_eps(self.prior, x_t, t, self.schedule)

    def score(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return self.prior.marginal_score(x_t, alpha_bar_at(self.schedule, t))


def gaussian_posterior(prior: GaussianPrior, matrix: np.ndarray, y: np.ndarray) -> GaussianPrior:
    """
    Posterior of x0 given the noiseless observation y = A x0.

    Raises:
        ValueError: If A is not full row rank
    """
    A = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if A.shape[1] != prior.dim:
        raise ValueError(f"Operator has {A.shape[1]} columns, prior dimension is {prior.dim}")
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise ValueError("Observation matrix must have full row rank")

    sigma = prior.cov_matrix
    sigma_at = sigma @ A.T
    gain = np.linalg.solve(A @ sigma_at, sigma_at.T).T
    mean = prior.mean + gain @ (y - A @ prior.mean)
    cov = sigma - gain @ sigma_at.T
    return GaussianPrior(mean, 0.5 * (cov + cov.T), allow_singular=True)


def exact_gaussian_conditional_score(
    prior: GaussianPrior,
    matrix: np.ndarray,
    y: np.ndarray,
    x_t: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    posterior: Optional[GaussianPrior] = None,
) -> np.ndarray:
    """Score of the noisy posterior N(sqrt(abar) mu_p, abar Sigma_p + (1 - abar) I)."""
    t = sched.check_step(t, allow_zero=False)
    if posterior is None:
        posterior = gaussian_posterior(prior, matrix, y)
    return posterior.marginal_score(x_t, alpha_bar_at(sched, t))
