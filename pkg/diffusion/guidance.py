"""
Reverse-time samplers and conditioning strategies.

Provides:
- ddpm_reverse_step: one ancestral DDPM update
- impute_score / recon_guided_score / separation_likelihood_grad: the score
  modifications behind imputation, reconstruction guidance and analytic separation
- Guidance strategy classes plugged into sample_with_guidance
- solve_inverse: task-level orchestration (bwe, declip, vocode, separate, linear)
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from diffusion.exceptions import NumericalError, SamplingDivergedError
from diffusion.operators import (
    ClipOperator,
    LowpassOperator,
    LowpassSpec,
    MatrixOperator,
    MelOperator,
    MixOperator,
    Operator,
)
from diffusion.schedule import (
    NoiseSchedule,
    alpha_bar_at,
    eps_from_score,
    estimate_x0,
    score_from_eps,
    score_from_x0,
)
from diffusion.score_models import GaussianScoreModel, ScoreModel, gaussian_posterior

logger = logging.getLogger(__name__)

GUIDANCE_MODES = ("auto", "none", "imputation", "reconstruction", "separation", "exact_gaussian")
VARIANCE_KINDS = ("beta_tilde", "beta")
SEPARATION_KINDS = ("analytic", "reconstruction")
XI_SCALINGS = ("noise_level", "unit")
TASKS = ("bwe", "declip", "vocode", "separate", "linear")

# Strategy chosen by mode=auto
TASK_DEFAULT_MODE = {
    "bwe": "imputation",
    "declip": "reconstruction",
    "vocode": "reconstruction",
    "separate": "separation",
    "linear": "reconstruction",
}


@dataclass
class GuidanceConfig:
    mode: str = "auto"
    xi0: float = 1.0
    norm_eps: float = 1e-8
    seed: int = 0
    variance: str = "beta_tilde"
    separation: str = "analytic"
    xi_scaling: str = "noise_level"
    trace_every: int = 0  # snapshot x0_hat every n steps; 0 disables snapshots

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"Unknown guidance mode {self.mode!r}, expected one of {GUIDANCE_MODES}")
        if self.variance not in VARIANCE_KINDS:
            raise ValueError(f"Unknown variance {self.variance!r}, expected one of {VARIANCE_KINDS}")
        if self.separation not in SEPARATION_KINDS:
            raise ValueError(f"Unknown separation {self.separation!r}, expected one of {SEPARATION_KINDS}")
        if self.xi_scaling not in XI_SCALINGS:
            raise ValueError(f"Unknown xi_scaling {self.xi_scaling!r}, expected one of {XI_SCALINGS}")
        if self.xi0 < 0:
            raise ValueError(f"xi0 must be >= 0, got {self.xi0}")
        if not self.norm_eps > 0:
            raise ValueError(f"norm_eps must be > 0, got {self.norm_eps}")
        if self.trace_every < 0:
            raise ValueError(f"trace_every must be >= 0, got {self.trace_every}")


@dataclass
class SamplerTrace:
    """Per-step diagnostics of one sampling run."""

    steps: List[int] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    state_rms: List[float] = field(default_factory=list)
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, t: int, grad_norm: float, residual: float, state_rms: float, x0_hat: Optional[np.ndarray] = None):
        self.steps.append(int(t))
        self.grad_norms.append(float(grad_norm))
        self.residuals.append(float(residual))
        self.state_rms.append(float(state_rms))
        if x0_hat is not None:
            self.snapshots[int(t)] = np.array(x0_hat, copy=True)

    def __len__(self) -> int:
        return len(self.steps)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "grad_norm", "residual", "state_rms"])
            for row in zip(self.steps, self.grad_norms, self.residuals, self.state_rms):
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])
        return path


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if np.size(x) else 0.0


def _chain_norm(g: np.ndarray, event_ndim: int) -> np.ndarray:
    """L2 norm over the trailing event axes, kept broadcastable against g."""
    axes = tuple(range(g.ndim - event_ndim, g.ndim))
    return np.sqrt(np.sum(g * g, axis=axes, keepdims=True))


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def ddpm_reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    z: np.ndarray,
    variance: str = "beta_tilde",
) -> np.ndarray:
    """
    Ancestral DDPM update x_t -> x_{t-1}.

    x_{t-1} = (x_t - beta / sqrt(1 - abar) * eps_hat) / sqrt(1 - beta) + sigma * z,
    with sigma^2 the posterior variance (beta_tilde) or beta itself.
    """
    t = sched.check_step(t, allow_zero=False)
    beta = sched.beta_at(t)
    abar = alpha_bar_at(sched, t)
    if variance == "beta_tilde":
        sigma2 = sched.posterior_variance(t)
    elif variance == "beta":
        sigma2 = beta if t > 1 else 0.0
    else:
        raise ValueError(f"Unknown variance {variance!r}")

    mean = (np.asarray(x_t) - beta / np.sqrt(1.0 - abar) * np.asarray(eps_hat)) / np.sqrt(1.0 - beta)
    if sigma2 == 0.0:
        return mean
    return mean + np.sqrt(sigma2) * np.asarray(z)


def _as_lowpass(lpf: Union[LowpassSpec, Operator]) -> Operator:
    return LowpassOperator(lpf) if isinstance(lpf, LowpassSpec) else lpf


def _impute(score, x_t, t, y, lpf: Operator, sched) -> Tuple[np.ndarray, np.ndarray]:
    x0_hat = estimate_x0(x_t, t, score, sched)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != x0_hat.shape[-1]:
        raise ValueError(f"Observation length {y.shape[-1]} does not match signal length {x0_hat.shape[-1]}")
    x0_tilde = x0_hat - lpf.apply(x0_hat) + y
    return score_from_x0(x0_tilde, x_t, t, sched), x0_tilde


def impute_score(
    score: np.ndarray,
    x_t: np.ndarray,
    t: int,
    y: np.ndarray,
    lpf: Union[LowpassSpec, Operator],
    sched: NoiseSchedule,
) -> np.ndarray:
    """
    Replace the low band of the denoised estimate by the observation.

    x0_tilde = x0_hat - LPF(x0_hat) + y, returned as the score
    (sqrt(abar) x0_tilde - x_t) / (1 - abar).
    """
    new_score, _ = _impute(score, x_t, t, y, _as_lowpass(lpf), sched)
    return new_score


def _recon_gradient(x_t, t, y, op: Operator, score, sched) -> Tuple[np.ndarray, np.ndarray]:
    abar = alpha_bar_at(sched, t)
    x0_hat = estimate_x0(x_t, t, score, sched)
    # d x0_hat / d x_t = 1 / sqrt(abar) with the score held fixed
    g = (2.0 / np.sqrt(abar)) * op.residual_grad(x0_hat, y)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"Non-finite reconstruction gradient at step {t}")
    return g, x0_hat


def guidance_step_size(
    g: np.ndarray, t: int, sched: NoiseSchedule, cfg: GuidanceConfig, event_ndim: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    xi(t) for reconstruction guidance, inversely proportional to the gradient norm.

    xi(t) = xi0 * kappa(t) / (||g|| + norm_eps), with the norm taken per chain over
    the trailing ``event_ndim`` axes. kappa(t) = sqrt(d / (1 - abar)) for
    ``noise_level`` scaling (d = event size, the typical norm of the score itself)
    and 1 for ``unit`` scaling.

    Returns:
        (xi broadcastable against g, per-chain gradient norms)
    """
    norms = _chain_norm(g, event_ndim)
    scale = cfg.xi0
    if cfg.xi_scaling == "noise_level":
        event_size = int(np.prod(g.shape[g.ndim - event_ndim:]))
        scale = scale * np.sqrt(event_size / (1.0 - alpha_bar_at(sched, t)))
    return scale / (norms + cfg.norm_eps), norms


def recon_guided_score(
    score: np.ndarray,
    x_t: np.ndarray,
    t: int,
    y: np.ndarray,
    op: Operator,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    event_ndim: int = 1,
) -> np.ndarray:
    """
    Reconstruction guidance: score - xi(t) * grad ||y - A(x0_hat)||^2.

    See guidance_step_size for xi(t).

    Raises:
        NumericalError: If the gradient contains NaN/Inf
    """
    t = sched.check_step(t, allow_zero=False)
    g, _ = _recon_gradient(x_t, t, y, op, score, sched)
    xi, _ = guidance_step_size(g, t, sched, cfg, event_ndim)
    return score - xi * g


def separation_likelihood_grad(
    x1_t: np.ndarray, x2_t: np.ndarray, t: int, y: np.ndarray, sched: NoiseSchedule
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradient of log N(y; (x1 + x2) / sqrt(abar), 2 (1 - abar) / abar) for each source.

    Both sources receive the same term (sqrt(abar) y - (x1 + x2)) / (2 (1 - abar)).
    """
    t = sched.check_step(t, allow_zero=False)
    x1_t = np.asarray(x1_t, dtype=np.float64)
    x2_t = np.asarray(x2_t, dtype=np.float64)
    if x1_t.shape != x2_t.shape:
        raise ValueError(f"Source shapes differ: {x1_t.shape} vs {x2_t.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != x1_t.shape[-1]:
        raise ValueError(f"Mixture length {y.shape[-1]} does not match source length {x1_t.shape[-1]}")
    abar = alpha_bar_at(sched, t)
    grad = (np.sqrt(abar) * y - (x1_t + x2_t)) / (2.0 * (1.0 - abar))
    return grad, grad.copy()


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


class Guidance:
    """Modifies the unconditional score before each reverse step."""

    name = "none"
    event_ndim = 1

    def modify(self, score: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule):
        """Returns (score, guidance gradient norm, observation residual RMS, x0_hat or None)."""
        raise NotImplementedError


class NoGuidance(Guidance):
    name = "none"

    def __init__(self, event_ndim: int = 1):
        self.event_ndim = event_ndim

    def modify(self, score, x_t, t, sched):
        return score, 0.0, float("nan"), None


class ImputationGuidance(Guidance):
    """Data consistency on the low band; residual is the post-imputation RMS of LPF(x0_tilde) - y."""

    name = "imputation"

    def __init__(self, lpf: Union[LowpassSpec, Operator], y: np.ndarray):
        self.lpf = _as_lowpass(lpf)
        self.y = np.asarray(y, dtype=np.float64)

    def modify(self, score, x_t, t, sched):
        new_score, x0_tilde = _impute(score, x_t, t, self.y, self.lpf, sched)
        residual = _rms(self.lpf.apply(x0_tilde) - self.y)
        grad_norm = float(np.mean(_chain_norm(new_score - score, self.event_ndim)))
        return new_score, grad_norm, residual, x0_tilde


class ReconstructionGuidance(Guidance):
    name = "reconstruction"

    def __init__(self, op: Operator, y: np.ndarray, cfg: GuidanceConfig, event_ndim: int = 1):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        self.cfg = cfg
        self.event_ndim = event_ndim

    def modify(self, score, x_t, t, sched):
        g, x0_hat = _recon_gradient(x_t, t, self.y, self.op, score, sched)
        xi, norms = guidance_step_size(g, t, sched, self.cfg, self.event_ndim)
        new_score = score - xi * g
        residual = _rms(self.op.apply(x0_hat) - self.y)
        return new_score, float(np.mean(norms)), residual, x0_hat


class SeparationGuidance(Guidance):
    """Analytic mixture likelihood over a stacked (..., 2, L) state."""

    name = "separation"
    event_ndim = 2

    def __init__(self, y: np.ndarray):
        self.y = np.asarray(y, dtype=np.float64)

    def modify(self, score, x_t, t, sched):
        g1, g2 = separation_likelihood_grad(x_t[..., 0, :], x_t[..., 1, :], t, self.y, sched)
        grad = np.stack([g1, g2], axis=-2)
        abar = alpha_bar_at(sched, t)
        residual = _rms((x_t[..., 0, :] + x_t[..., 1, :]) / np.sqrt(abar) - self.y)
        x0_hat = estimate_x0(x_t, t, score, sched)
        return score + grad, float(np.mean(_chain_norm(grad, self.event_ndim))), residual, x0_hat


class ExactGaussianGuidance(Guidance):
    """Replaces the score by the exact conditional score of a Gaussian prior under y = A x."""

    name = "exact_gaussian"

    def __init__(self, model: GaussianScoreModel, matrix: np.ndarray, y: np.ndarray):
        self.prior = model.prior
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64)
        self.posterior = gaussian_posterior(self.prior, self.matrix, self.y)

    def modify(self, score, x_t, t, sched):
        new_score = self.posterior.marginal_score(x_t, alpha_bar_at(sched, t))
        x0_hat = estimate_x0(x_t, t, new_score, sched)
        residual = _rms(x0_hat @ self.matrix.T - self.y)
        return new_score, float(np.mean(_chain_norm(new_score - score, self.event_ndim))), residual, x0_hat


# ---------------------------------------------------------------------------
# Sampling loop
# ---------------------------------------------------------------------------


def _check_model_schedule(model: ScoreModel, sched: NoiseSchedule):
    model_sched = getattr(model, "schedule", None)
    if model_sched is not None and model_sched.params() != sched.params():
        raise ValueError(f"Model schedule {model_sched.params()} does not match sampling schedule {sched.params()}")


def sample_with_guidance(
    model: ScoreModel,
    sched: NoiseSchedule,
    shape: Tuple[int, ...],
    guidance: Optional[Guidance] = None,
    cfg: Optional[GuidanceConfig] = None,
    x_init: Optional[np.ndarray] = None,
    progress: bool = False,
) -> Tuple[np.ndarray, SamplerTrace]:
    """
    Run T ancestral steps from x_T ~ N(0, I) (or x_init) with the score modified by `guidance`.

    Noise z is drawn at every step t > 1 whatever the guidance, so runs sharing
    a seed consume identical random streams.

    Raises:
        SamplingDivergedError: If the state becomes non-finite (carries the trace)
    """
    cfg = cfg or GuidanceConfig()
    guidance = guidance or NoGuidance()
    _check_model_schedule(model, sched)
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(shape)

    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    if x.shape != shape:
        raise ValueError(f"Initial state shape {x.shape} does not match {shape}")
    trace = SamplerTrace()

    logger.info(f"Sampling {shape} over {sched.num_steps} steps with {guidance.name} guidance")
    for t in tqdm(range(sched.num_steps, 0, -1), desc=f"Sampling ({guidance.name})", disable=not progress):
        eps_hat = model.predict_eps(x, t)
        score = score_from_eps(eps_hat, t, sched)
        try:
            score, grad_norm, residual, x0_hat = guidance.modify(score, x, t, sched)
        except NumericalError as e:
            raise SamplingDivergedError(str(e), trace) from e
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        x = ddpm_reverse_step(x, t, eps_from_score(score, t, sched), sched, z, cfg.variance)

        snapshot = None
        if cfg.trace_every and x0_hat is not None and (t % cfg.trace_every == 0 or t == 1):
            snapshot = x0_hat
        trace.record(t, grad_norm, residual, _rms(x), snapshot)
        if not np.all(np.isfinite(x)):
            raise SamplingDivergedError(f"Sampler state became non-finite at step {t}", trace)
        logger.debug(f"t={t} grad_norm={grad_norm:.4g} residual={residual:.4g} rms={trace.state_rms[-1]:.4g}")

    logger.info(f"Sampling finished, final state RMS {trace.state_rms[-1]:.4f}")
    return x, trace


def resolve_mode(task: str, cfg: GuidanceConfig) -> str:
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}, expected one of {TASKS}")
    return TASK_DEFAULT_MODE[task] if cfg.mode == "auto" else cfg.mode


def _default_operator(task: str) -> Operator:
    if task == "bwe":
        return LowpassOperator()
    if task == "declip":
        return ClipOperator()
    if task == "vocode":
        return MelOperator()
    if task == "separate":
        return MixOperator()
    raise ValueError(f"Task {task!r} requires an explicit operator")


def build_guidance(
    task: str, y: np.ndarray, model: ScoreModel, cfg: GuidanceConfig, operator: Operator
) -> Guidance:
    """Bind a task and config to a guidance strategy."""
    mode = resolve_mode(task, cfg)
    event_ndim = 2 if task == "separate" else 1

    if mode == "none":
        return NoGuidance(event_ndim)
    if mode == "imputation":
        return ImputationGuidance(operator, y)
    if mode == "separation" or (task == "separate" and mode == "reconstruction"):
        if task != "separate":
            raise ValueError(f"Separation guidance applies only to the separate task, not {task!r}")
        if mode == "separation" and cfg.separation == "analytic":
            return SeparationGuidance(y)
        if cfg.xi0 == 0:
            logger.warning("xi0 = 0: reconstruction guidance disabled, sampling unconditionally")
            return NoGuidance(event_ndim)
        return ReconstructionGuidance(MixOperator(), y, cfg, event_ndim=2)
    if mode == "reconstruction":
        if cfg.xi0 == 0:
            logger.warning("xi0 = 0: reconstruction guidance disabled, sampling unconditionally")
            return NoGuidance(event_ndim)
        return ReconstructionGuidance(operator, y, cfg, event_ndim)
    if mode == "exact_gaussian":
        if not isinstance(model, GaussianScoreModel):
            raise ValueError("exact_gaussian guidance requires a GaussianScoreModel")
        if not isinstance(operator, MatrixOperator):
            raise ValueError("exact_gaussian guidance requires a MatrixOperator")
        return ExactGaussianGuidance(model, operator.matrix, y)
    raise ValueError(f"Unsupported guidance mode {mode!r}")


def solve_inverse(
    task: str,
    y: np.ndarray,
    model: ScoreModel,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    operator: Optional[Operator] = None,
    num_chains: Optional[int] = None,
    progress: bool = False,
) -> Tuple[np.ndarray, SamplerTrace]:
    """
    Restore a signal from its observation.

    Args:
        task: One of bwe, declip, vocode, separate, linear
        y: Observation (lowpassed / clipped waveform, log-mel tensor, mixture, or A x)
        model: Score model whose schedule must match `sched`
        sched: Noise schedule
        cfg: Guidance settings (mode=auto binds bwe->imputation,
             declip/vocode/linear->reconstruction, separate->separation)
        operator: Observation operator (defaults per task; required for linear)
        num_chains: Independent chains sharing the observation; None for a single chain

    Returns:
        Restored signal(s) and the sampler trace. The separate task returns the
        stacked sources with shape (..., 2, L).
    """
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}, expected one of {TASKS}")
    operator = operator or _default_operator(task)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NumericalError("Observation contains NaN or Inf")

    shape = operator.input_shape(y.shape)
    if num_chains is not None:
        if num_chains < 1:
            raise ValueError(f"num_chains must be >= 1, got {num_chains}")
        shape = (int(num_chains),) + tuple(shape)

    guidance = build_guidance(task, y, model, cfg, operator)
    logger.info(f"Task {task}: {guidance.name} guidance, state shape {shape}")
    return sample_with_guidance(model, sched, shape, guidance, cfg, progress=progress)
