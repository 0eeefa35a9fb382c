"""
Analytic oracle suites.

Each suite measures one statistic against a closed-form answer and reports it
together with its pass threshold. run_oracle_suites runs all of them.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, List

import numpy as np
from scipy import stats

from diffusion.denoiser import ToyDenoiser
from diffusion.guidance import (
    ExactGaussianGuidance,
    GuidanceConfig,
    ReconstructionGuidance,
    sample_with_guidance,
    separation_likelihood_grad,
)
from diffusion.operators import (
    ClipOperator,
    ClipSpec,
    LowpassOperator,
    LowpassSpec,
    MatrixOperator,
    MelOperator,
    MelSpec,
    MixOperator,
    clip_apply,
    selection_matrix,
)
from diffusion.schedule import make_linear_schedule
from diffusion.score_models import GaussianPrior, GaussianScoreModel, gaussian_analytic_eps, gaussian_posterior
from utils.dsp_utils import StftConfig, design_lowpass_fir, frequency_response_db, istft, stft

logger = logging.getLogger(__name__)


@dataclass
class OracleResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_record(self) -> dict:
        return asdict(self)


def _random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    m = rng.standard_normal((d, d))
    return m @ m.T / d + 0.5 * np.eye(d)


def _directional_fd(loss: Callable[[np.ndarray], float], x: np.ndarray, v: np.ndarray, h: float) -> float:
    return (loss(x + h * v) - loss(x - h * v)) / (2.0 * h)


def _rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def ar1_selection_problem(rng: np.random.Generator, d: int = 32, rho: float = 0.9, stride: int = 4):
    """AR(1) prior, every `stride`-th coordinate observed, and an observation from the prior."""
    cov = rho ** np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    prior = GaussianPrior(np.zeros(d), cov)
    observed = np.arange(0, d, stride)
    matrix = selection_matrix(d, observed)
    x_true = prior.sample(rng, 1)[0]
    return prior, matrix, matrix @ x_true, observed


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def check_schedule_recurrence(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(200, 1e-4, 0.02)
    direct = np.array([np.prod(1.0 - sched.betas[:s]) for s in range(1, sched.num_steps + 1)])
    err = float(np.max(np.abs(direct - sched.alpha_bars)))
    return OracleResult(
        "schedule_recurrence", err < 1e-12, err, 1e-12, f"abar(200) = {sched.alpha_bar_at(200):.6f}"
    )


def check_analytic_score_fd(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(200)
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 9))
        prior = GaussianPrior(rng.standard_normal(d), _random_spd(rng, d))
        t = int(rng.integers(1, sched.num_steps + 1))
        abar = sched.alpha_bar_at(t)
        x_t = rng.standard_normal(d)
        score = -gaussian_analytic_eps(prior, x_t, t, sched) / np.sqrt(1.0 - abar)
        fd = np.array([
            (prior.marginal_logpdf(x_t + h * e, abar) - prior.marginal_logpdf(x_t - h * e, abar)) / (2.0 * h)
            for e in np.eye(d)
        ])
        worst = max(worst, float(np.max(np.abs(fd - score)) / max(np.max(np.abs(score)), 1e-12)))
    return OracleResult("analytic_score_fd", worst < 1e-6, worst, 1e-6, "20 random SPD priors, d <= 8")


def check_unconditional_fidelity(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(200)
    d, n = 16, 10_000
    model = GaussianScoreModel(GaussianPrior(np.zeros(d), np.ones(d)), sched)
    x, _ = sample_with_guidance(model, sched, (n, d), cfg=GuidanceConfig(mode="none", seed=int(rng.integers(2**31))))
    mean_err = float(np.max(np.abs(x.mean(axis=0))))
    var = x.var(axis=0)
    var_err = float(np.max(np.abs(var - 1.0)))
    passed = mean_err < 0.05 and var_err <= 0.1
    return OracleResult(
        "unconditional_fidelity", passed, mean_err, 0.05,
        f"max |mean| {mean_err:.4f}, variance range [{var.min():.3f}, {var.max():.3f}]",
    )


def check_exact_conditional_posterior(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(1000)
    prior, matrix, y, observed = ar1_selection_problem(rng)
    n = 2_000 if quick else 10_000
    model = GaussianScoreModel(prior, sched)
    guidance = ExactGaussianGuidance(model, matrix, y)
    x, _ = sample_with_guidance(model, sched, (n, prior.dim), guidance, GuidanceConfig(seed=int(rng.integers(2**31))))

    posterior = gaussian_posterior(prior, matrix, y)
    hidden = np.setdiff1d(np.arange(prior.dim), observed)
    diff = x.mean(axis=0)[hidden] - posterior.mean[hidden]
    cov_hidden = posterior.cov_matrix[np.ix_(hidden, hidden)]
    # Joint 3-sigma test: n * diff' Sigma^-1 diff ~ chi2(k)
    statistic = float(n * diff @ np.linalg.solve(cov_hidden, diff))
    threshold = float(stats.chi2.ppf(stats.chi2.cdf(9.0, 1), hidden.size))
    observed_err = float(np.max(np.abs(x[:, observed] - y)))
    passed = statistic < threshold and observed_err < 1e-6
    return OracleResult(
        "exact_conditional_posterior", passed, statistic, threshold,
        f"{n} chains, {hidden.size} hidden coordinates, max observed error {observed_err:.2e}",
    )


def check_reconstruction_guidance_error(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(1000)
    prior, matrix, y, _ = ar1_selection_problem(rng)
    n = 500 if quick else 2_000
    model = GaussianScoreModel(prior, sched)
    cfg = GuidanceConfig(mode="reconstruction", xi0=10.0, xi_scaling="unit", seed=int(rng.integers(2**31)))
    guidance = ReconstructionGuidance(MatrixOperator(matrix), y, cfg)
    x, _ = sample_with_guidance(model, sched, (n, prior.dim), guidance, cfg)

    posterior = gaussian_posterior(prior, matrix, y)
    rel = float(np.linalg.norm(x.mean(axis=0) - posterior.mean) / np.linalg.norm(posterior.mean))
    return OracleResult(
        "reconstruction_guidance_error", rel < 0.15, rel, 0.15, f"xi0 = {cfg.xi0}, {n} chains"
    )


def check_separation_likelihood(rng, quick: bool) -> OracleResult:
    scalar_sched = make_linear_schedule(1, 0.75, 0.75)
    g1, g2 = separation_likelihood_grad(np.array([0.1]), np.array([0.1]), 1, np.array([1.0]), scalar_sched)
    scalar_err = max(abs(g1[0] - 0.2), abs(g2[0] - 0.2))

    sched = make_linear_schedule(200)
    h = 1e-6
    worst = 0.0
    for _ in range(10):
        t = int(rng.integers(1, sched.num_steps + 1))
        abar = sched.alpha_bar_at(t)
        y, x1, x2 = rng.standard_normal(3)
        scale = np.sqrt(2.0 * (1.0 - abar) / abar)

        def loglik(a, b):
            return stats.norm.logpdf(y, loc=(a + b) / np.sqrt(abar), scale=scale)

        grad, _ = separation_likelihood_grad(np.array([x1]), np.array([x2]), t, np.array([y]), sched)
        fd = (loglik(x1 + h, x2) - loglik(x1 - h, x2)) / (2.0 * h)
        worst = max(worst, _rel_err(fd, grad[0], floor=1e-3))
    passed = scalar_err < 1e-12 and worst < 1e-6
    return OracleResult(
        "separation_likelihood", passed, worst, 1e-6, f"scalar case error {scalar_err:.1e}"
    )


def check_operator_gradients(rng, quick: bool) -> OracleResult:
    cases = [
        ("lowpass", LowpassOperator(LowpassSpec(cutoff_hz=2000.0, taps=33)), rng.standard_normal(200)),
        ("clip", ClipOperator(ClipSpec(0.5)), rng.standard_normal(200)),
        ("mel", MelOperator(MelSpec(n_fft=64, hop=16, n_mels=8)), rng.standard_normal(256)),
        ("mix", MixOperator(), rng.standard_normal((2, 200))),
        ("matrix", MatrixOperator(rng.standard_normal((5, 12))), rng.standard_normal(12)),
    ]
    worst, zero_worst, details = 0.0, 0.0, []
    for name, op, x in cases:
        y = op.apply(x + 0.3 * rng.standard_normal(x.shape))
        v = rng.standard_normal(x.shape)

        def loss(z):
            return 0.5 * float(np.sum((op.apply(z) - y) ** 2))

        fd = _directional_fd(loss, x, v, 1e-6)
        analytic = float(np.sum(op.residual_grad(x, y) * v))
        err = _rel_err(fd, analytic)
        zero = float(np.max(np.abs(op.residual_grad(x, op.apply(x)))))
        worst, zero_worst = max(worst, err), max(zero_worst, zero)
        details.append(f"{name}={err:.1e}")
    passed = worst < 1e-4 and zero_worst < 1e-10
    return OracleResult("operator_gradients", passed, worst, 1e-4, ", ".join(details))


def check_dsp_roundtrip(rng, quick: bool) -> OracleResult:
    cfg = StftConfig()
    worst = 0.0
    for length in (1024, 4097, 16000):
        x = rng.standard_normal(length)
        rec = istft(stft(x, cfg), cfg, length=length)
        worst = max(worst, float(np.sqrt(np.mean((rec - x) ** 2))))

    spec = LowpassSpec()
    stop_db = float(frequency_response_db(design_lowpass_fir(spec), [2.0 * spec.cutoff_hz], spec.sample_rate_hz)[0])

    x = 2.0 * rng.standard_normal(1000)
    clip_err = float(np.max(np.abs(clip_apply(x, ClipSpec(0.3)) - np.clip(x, -0.3, 0.3))))

    passed = worst < 1e-6 and stop_db <= -40.0 and clip_err < 1e-15
    return OracleResult(
        "dsp_roundtrip", passed, worst, 1e-6,
        f"stopband at 2x cutoff {stop_db:.1f} dB, clip formula error {clip_err:.1e}",
    )


def check_denoiser_gradients(rng, quick: bool) -> OracleResult:
    sched = make_linear_schedule(200)
    model = ToyDenoiser(sched, channels=4, blocks=3, fourier_features=4, seed=int(rng.integers(2**31)))
    # Randomize every parameter so no gradient is trivially zero
    model.set_flat_params(0.5 * rng.standard_normal(model.num_parameters))

    x_t = rng.standard_normal((2, 48))
    steps = rng.integers(1, sched.num_steps + 1, size=2)
    eps = rng.standard_normal((2, 48))
    _, grads = model.loss_and_grads(x_t, steps, eps)
    flat_grad = np.concatenate([grads[name].ravel() for name in model.param_shapes()])

    base = model.get_flat_params()
    count = 100 if quick else 200
    picks = rng.choice(base.size, size=min(count, base.size), replace=False)
    h = 1e-5
    worst = 0.0
    for i in picks:
        shifted = base.copy()
        shifted[i] += h
        model.set_flat_params(shifted)
        up, _ = model.loss_and_grads(x_t, steps, eps)
        shifted[i] -= 2.0 * h
        model.set_flat_params(shifted)
        down, _ = model.loss_and_grads(x_t, steps, eps)
        fd = (up - down) / (2.0 * h)
        worst = max(worst, _rel_err(fd, flat_grad[i], floor=1e-6))
    model.set_flat_params(base)
    return OracleResult("denoiser_gradients", worst < 1e-4, worst, 1e-4, f"{picks.size} parameters")


SUITES = [
    check_schedule_recurrence,
    check_analytic_score_fd,
    check_unconditional_fidelity,
    check_exact_conditional_posterior,
    check_reconstruction_guidance_error,
    check_separation_likelihood,
    check_operator_gradients,
    check_dsp_roundtrip,
    check_denoiser_gradients,
]


def run_oracle_suites(quick: bool = False, seed: int = 0) -> List[OracleResult]:
    """Run every oracle suite with its own generator derived from `seed`."""
    results = []
    for index, suite in enumerate(SUITES):
        rng = np.random.default_rng([seed, index])
        try:
            result = suite(rng, quick)
        except Exception as e:
            logger.error(f"Oracle suite {suite.__name__} raised: {e}", exc_info=True)
            result = OracleResult(suite.__name__.removeprefix("check_"), False, float("nan"), float("nan"), str(e))
        status = "✅" if result.passed else "❌"
        logger.info(f"{status} {result.name}: {result.value:.3g} (threshold {result.threshold:.3g}) {result.detail}")
        results.append(result)
    return results
