"""
Discrete noise schedule for diffusion sampling.

Provides:
- NoiseSchedule: beta / alpha-bar tables indexed 1..T (step 0 is clean data)
- make_linear_schedule: the linear beta schedule used for training and sampling
- The algebra tying x0, x_t, eps and the score together
"""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_NUM_STEPS = 200
DEFAULT_BETA_MIN = 0.0001
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Immutable beta / alpha-bar tables.

    ``betas[s - 1]`` and ``alpha_bars[s - 1]`` hold step ``s`` for s in 1..T.
    ``alpha_bar_at(0)`` is defined as 1.
    """

    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    beta_min: float = field(default=DEFAULT_BETA_MIN)
    beta_max: float = field(default=DEFAULT_BETA_MAX)

    def __post_init__(self):
        # Freeze the tables so the schedule can be shared between workers
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    def check_step(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lower = 0 if allow_zero else 1
        if t < lower or t > self.num_steps:
            raise ValueError(f"Step index {t} out of range [{lower}, {self.num_steps}]")
        return t

    def beta_at(self, t: int) -> float:
        t = self.check_step(t, allow_zero=False)
        return float(self.betas[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        return alpha_bar_at(self, t)

    def posterior_variance(self, t: int) -> float:
        """DDPM posterior variance (1 - abar[t-1]) / (1 - abar[t]) * beta[t]."""
        t = self.check_step(t, allow_zero=False)
        return (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t)) * self.beta_at(t)

    def params(self) -> dict:
        return {"num_steps": self.num_steps, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_linear_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """
    Build the linear beta schedule.

    Args:
        num_steps: Number of diffusion steps T (>= 1)
        beta_min: First beta value
        beta_max: Last beta value

    Returns:
        NoiseSchedule with betas linear between beta_min and beta_max

    Raises:
        ValueError: If T is not positive or the betas fall outside (0, 1)
    """
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )
    num_steps = int(num_steps)

    if num_steps == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        steps = np.arange(num_steps, dtype=np.float64)
        betas = beta_min + steps / (num_steps - 1) * (beta_max - beta_min)

    # multiply.accumulate is sequential, so abar[t] = abar[t-1] * (1 - beta[t]) bit-exactly
    alpha_bars = np.multiply.accumulate(1.0 - betas)

    logger.debug(f"Linear schedule T={num_steps}, abar(T)={alpha_bars[-1]:.6f}")
    return NoiseSchedule(
        num_steps=num_steps,
        betas=betas,
        alpha_bars=alpha_bars,
        beta_min=float(beta_min),
        beta_max=float(beta_max),
    )


def alpha_bar_at(sched: NoiseSchedule, t: int) -> float:
    """Exact table lookup of alpha-bar at step t (t = 0 gives 1)."""
    t = sched.check_step(t)
    if t == 0:
        return 1.0
    return float(sched.alpha_bars[t - 1])


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise clean data to step t: sqrt(abar) * x0 + sqrt(1 - abar) * eps."""
    _check_same_shape(x0, eps, "x0/eps")
    abar = alpha_bar_at(sched, t)
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def score_from_eps(eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Convert an eps prediction into a score: -eps / sqrt(1 - abar)."""
    t = sched.check_step(t, allow_zero=False)
    return -np.asarray(eps_hat) / np.sqrt(1.0 - alpha_bar_at(sched, t))


def eps_from_score(score: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Inverse of score_from_eps."""
    t = sched.check_step(t, allow_zero=False)
    return -np.asarray(score) * np.sqrt(1.0 - alpha_bar_at(sched, t))


def estimate_x0(x_t: np.ndarray, t: int, score: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """
    One-step denoised estimate (x_t + (1 - abar) * score) / sqrt(abar).

    The "+" sign follows from score = -eps / sqrt(1 - abar).
    """
    _check_same_shape(x_t, score, "x_t/score")
    abar = alpha_bar_at(sched, t)
    return (np.asarray(x_t) + (1.0 - abar) * np.asarray(score)) / np.sqrt(abar)


def score_from_x0(x0_hat: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Score implied by a denoised estimate: (sqrt(abar) * x0 - x_t) / (1 - abar)."""
    t = sched.check_step(t, allow_zero=False)
    abar = alpha_bar_at(sched, t)
    return (np.sqrt(abar) * np.asarray(x0_hat) - np.asarray(x_t)) / (1.0 - abar)
