"""
Diffusion package for diffrestore.

Organized into logical modules:
- schedule: noise schedule and the x0 / eps / score algebra
- score_models: Gaussian oracle priors and the score model protocol
- denoiser: trainable eps-predictor and its training loop
- operators: degradation operators and their residual gradients
- guidance: reverse-time sampler and conditioning strategies
- oracles: analytic verification suites
"""

from .exceptions import (
    DiffRestoreError,
    ConfigError,
    WaveformFormatError,
    NumericalError,
    SamplingDivergedError,
    TrainingDivergedError
)

from .schedule import (
    NoiseSchedule,
    make_linear_schedule,
    alpha_bar_at,
    forward_noise,
    score_from_eps,
    estimate_x0
)

from .score_models import (
    ScoreModel,
    GaussianPrior,
    GaussianScoreModel,
    gaussian_analytic_eps,
    gaussian_posterior,
    exact_gaussian_conditional_score
)

from .denoiser import (
    ToyDenoiser,
    TrainConfig,
    denoiser_forward,
    train_denoiser
)

from .operators import (
    LowpassSpec,
    ClipSpec,
    MelSpec,
    LowpassOperator,
    ClipOperator,
    MelOperator,
    MixOperator,
    MatrixOperator,
    lowpass_apply,
    clip_apply,
    mel_apply,
    mix_apply,
    residual_grad
)

from .guidance import (
    GuidanceConfig,
    SamplerTrace,
    ddpm_reverse_step,
    impute_score,
    recon_guided_score,
    guidance_step_size,
    separation_likelihood_grad,
    solve_inverse
)

from .oracles import (
    OracleResult,
    run_oracle_suites
)
