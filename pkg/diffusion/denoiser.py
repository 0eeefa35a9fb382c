"""
Trainable time-domain denoiser.

A miniature dilated residual convolution network in the Diffwave manner:
- 1x1 input projection to C channels
- B residual blocks, kernel 3, dilations cycling (1, 2, 4, 8), gated tanh/sigmoid units
- noise-level conditioning: beta(t) -> random Fourier features -> per-block channel bias
- skip connections summed into a 1x1 output head, zero-initialized

Backpropagation is written out by hand for this fixed architecture, together with
an Adam optimizer and the eps-prediction training loop (uniform t, lambda(t) = 1).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from diffusion.exceptions import NumericalError, TrainingDivergedError
from diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

INV_SQRT2 = 1.0 / math.sqrt(2.0)
DEFAULT_DILATION_CYCLE = (1, 2, 4, 8)
KERNEL_WIDTH = 3


def _silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    segment_length: int = 8000
    epochs: int = 1
    seed: int = 0
    max_steps: int = 0  # 0: run all epochs
    log_every: int = 100

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "segment_length", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


class ToyDenoiser:
    """
    Dilated residual eps-predictor conditioned on beta(t).

    Parameters live in ``self.params`` (name -> array); ``fourier_freqs`` are fixed
    at construction from a seeded normal draw and never trained.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        channels: int = 32,
        blocks: int = 8,
        fourier_features: int = 16,
        fourier_scale: float = 100.0,
        dilation_cycle: Sequence[int] = DEFAULT_DILATION_CYCLE,
        seed: int = 0,
        dtype=np.float64,
        params: Optional[Dict[str, np.ndarray]] = None,
        fourier_freqs: Optional[np.ndarray] = None,
    ):
        if channels < 1 or blocks < 1:
            raise ValueError("channels and blocks must be positive")
        if fourier_features < 2 or fourier_features % 2:
            raise ValueError(f"fourier_features must be an even number >= 2, got {fourier_features}")

        self.schedule = schedule
        self.channels = int(channels)
        self.blocks = int(blocks)
        self.fourier_features = int(fourier_features)
        self.fourier_scale = float(fourier_scale)
        self.dilation_cycle = tuple(int(d) for d in dilation_cycle)
        self.dilations = [self.dilation_cycle[k % len(self.dilation_cycle)] for k in range(self.blocks)]
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(self.seed)
        if fourier_freqs is None:
            fourier_freqs = rng.standard_normal(self.fourier_features // 2) * self.fourier_scale
        self.fourier_freqs = np.asarray(fourier_freqs, dtype=np.float64)

        if params is None:
            params = self._init_params(rng)
        self.params = {name: np.asarray(value, dtype=self.dtype) for name, value in params.items()}
        self._check_param_shapes()

        logger.info(
            f"ToyDenoiser: {self.channels} channels x {self.blocks} blocks, "
            f"receptive field {self.receptive_field}, {self.num_parameters} parameters"
        )

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        C, E = self.channels, self.fourier_features
        shapes = {
            "emb_w": (C, E),
            "emb_b": (C,),
            "in_w": (C,),
            "in_b": (C,),
        }
        for k in range(self.blocks):
            shapes[f"blocks.{k}.cond_w"] = (C, C)
            shapes[f"blocks.{k}.cond_b"] = (C,)
            shapes[f"blocks.{k}.conv_w"] = (2 * C, C, KERNEL_WIDTH)
            shapes[f"blocks.{k}.conv_b"] = (2 * C,)
            shapes[f"blocks.{k}.out_w"] = (2 * C, C)
            shapes[f"blocks.{k}.out_b"] = (2 * C,)
        shapes["skip_w"] = (C, C)
        shapes["skip_b"] = (C,)
        shapes["final_w"] = (C,)
        shapes["final_b"] = (1,)
        return shapes

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("_b") or name == "final_w":
                params[name] = np.zeros(shape)
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            params[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
        return params

    def _check_param_shapes(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"Parameter names do not match the architecture: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"Parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def receptive_field(self) -> int:
        return 1 + (KERNEL_WIDTH - 1) * sum(self.dilations)

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel().astype(np.float64) for name in self.param_shapes()])

    def set_flat_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters:
            raise ValueError(f"Expected {self.num_parameters} parameters, got {flat.size}")
        offset = 0
        for name, shape in self.param_shapes().items():
            size = int(np.prod(shape))
            self.params[name] = flat[offset:offset + size].reshape(shape).astype(self.dtype)
            offset += size

    def architecture(self) -> dict:
        return {
            "channels": self.channels,
            "blocks": self.blocks,
            "fourier_features": self.fourier_features,
            "fourier_scale": self.fourier_scale,
            "dilation_cycle": list(self.dilation_cycle),
            "seed": self.seed,
        }

    # -- forward / backward --------------------------------------------------

    def _fourier_embedding(self, betas: np.ndarray) -> np.ndarray:
        phase = 2.0 * np.pi * betas[:, None] * self.fourier_freqs[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1).astype(self.dtype)

    def _check_finite(self, x: np.ndarray):
        if not np.all(np.isfinite(x)):
            raise NumericalError("Denoiser input contains NaN or Inf")
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"Denoiser parameter {name} contains NaN or Inf")

    def forward(self, x: np.ndarray, betas: np.ndarray) -> Tuple[np.ndarray, dict]:
        """
        Args:
            x: Noisy signals (B, L)
            betas: beta(t) per signal (B,)

        Returns:
            eps_hat (B, L) and the cache needed by backward
        """
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        B, L = x.shape
        if L < self.receptive_field:
            raise ValueError(f"Input length {L} is shorter than the receptive field {self.receptive_field}")
        C = self.channels

        feats = self._fourier_embedding(np.asarray(betas, dtype=np.float64))
        pre_e = feats @ p["emb_w"].T + p["emb_b"]
        e = _silu(pre_e)

        pre_h = p["in_w"][None, :, None] * x[:, None, :] + p["in_b"][None, :, None]
        h = _silu(pre_h)
        skip = np.zeros_like(h)

        block_cache = []
        for k, d in enumerate(self.dilations):
            cond = e @ p[f"blocks.{k}.cond_w"].T + p[f"blocks.{k}.cond_b"]
            u = h + cond[:, :, None]
            u_pad = np.pad(u, ((0, 0), (0, 0), (d, d)))
            w = p[f"blocks.{k}.conv_w"]
            v = p[f"blocks.{k}.conv_b"][None, :, None] + sum(
                np.matmul(w[:, :, j], u_pad[:, :, j * d:j * d + L]) for j in range(KERNEL_WIDTH)
            )
            a = np.tanh(v[:, :C])
            g = expit(v[:, C:])
            z = a * g
            o = np.matmul(p[f"blocks.{k}.out_w"], z) + p[f"blocks.{k}.out_b"][None, :, None]
            h = (h + o[:, :C]) * INV_SQRT2
            skip = skip + o[:, C:]
            block_cache.append((u_pad, a, g, z))

        s = skip / math.sqrt(self.blocks)
        pre_q = np.matmul(p["skip_w"], s) + p["skip_b"][None, :, None]
        q = _silu(pre_q)
        out = np.einsum("c,bcl->bl", p["final_w"], q) + p["final_b"][0]

        cache = {
            "x": x,
            "feats": feats,
            "pre_e": pre_e,
            "e": e,
            "pre_h": pre_h,
            "blocks": block_cache,
            "s": s,
            "pre_q": pre_q,
            "q": q,
        }
        return out, cache

    def backward(self, dout: np.ndarray, cache: dict) -> Dict[str, np.ndarray]:
        """Gradients of a scalar loss given d loss / d eps_hat."""
        p = self.params
        C = self.channels
        dout = np.asarray(dout, dtype=self.dtype)
        L = dout.shape[-1]
        grads: Dict[str, np.ndarray] = {}

        q, pre_q = cache["q"], cache["pre_q"]
        grads["final_w"] = np.einsum("bl,bcl->c", dout, q)
        grads["final_b"] = np.array([dout.sum()], dtype=self.dtype)
        dpre_q = p["final_w"][None, :, None] * dout[:, None, :] * _silu_grad(pre_q)
        grads["skip_w"] = np.tensordot(dpre_q, cache["s"], axes=([0, 2], [0, 2]))
        grads["skip_b"] = dpre_q.sum(axis=(0, 2))
        dskip = np.matmul(p["skip_w"].T, dpre_q) / math.sqrt(self.blocks)

        e = cache["e"]
        de = np.zeros_like(e)
        dh = np.zeros_like(dskip)
        for k in reversed(range(self.blocks)):
            d = self.dilations[k]
            u_pad, a, g, z = cache["blocks"][k]

            do = np.concatenate([dh * INV_SQRT2, dskip], axis=1)
            grads[f"blocks.{k}.out_w"] = np.tensordot(do, z, axes=([0, 2], [0, 2]))
            grads[f"blocks.{k}.out_b"] = do.sum(axis=(0, 2))
            dz = np.matmul(p[f"blocks.{k}.out_w"].T, do)

            dv = np.concatenate([dz * g * (1.0 - a * a), dz * a * g * (1.0 - g)], axis=1)
            grads[f"blocks.{k}.conv_b"] = dv.sum(axis=(0, 2))

            w = p[f"blocks.{k}.conv_w"]
            dw = np.empty_like(w)
            du_pad = np.zeros_like(u_pad)
            for j in range(KERNEL_WIDTH):
                window = slice(j * d, j * d + L)
                dw[:, :, j] = np.tensordot(dv, u_pad[:, :, window], axes=([0, 2], [0, 2]))
                du_pad[:, :, window] += np.matmul(w[:, :, j].T, dv)
            grads[f"blocks.{k}.conv_w"] = dw
            du = du_pad[:, :, d:d + L]

            dcond = du.sum(axis=2)
            grads[f"blocks.{k}.cond_w"] = dcond.T @ e
            grads[f"blocks.{k}.cond_b"] = dcond.sum(axis=0)
            de += dcond @ p[f"blocks.{k}.cond_w"]

            dh = dh * INV_SQRT2 + du

        dpre_h = dh * _silu_grad(cache["pre_h"])
        grads["in_w"] = np.einsum("bcl,bl->c", dpre_h, cache["x"])
        grads["in_b"] = dpre_h.sum(axis=(0, 2))

        dpre_e = de * _silu_grad(cache["pre_e"])
        grads["emb_w"] = dpre_e.T @ cache["feats"]
        grads["emb_b"] = dpre_e.sum(axis=0)
        return grads

    def loss_and_grads(
        self, x_t: np.ndarray, steps: np.ndarray, eps: np.ndarray
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean squared eps error over the minibatch and its parameter gradients."""
        betas = self.schedule.betas[np.asarray(steps, dtype=int) - 1]
        pred, cache = self.forward(x_t, betas)
        diff = pred - np.asarray(eps, dtype=self.dtype)
        loss = float(np.mean(diff * diff))
        grads = self.backward(2.0 * diff / diff.size, cache)
        return loss, grads

    # -- ScoreModel ------------------------------------------------------------

    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return denoiser_forward(self, x_t, t, self.schedule)


def denoiser_forward(model: ToyDenoiser, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """
    eps_hat for signals of any leading shape (..., L) at step t.

    Raises:
        NumericalError: If the input or the parameters contain NaN/Inf
        ValueError: If the signal is shorter than the receptive field
    """
    x_t = np.asarray(x_t)
    model._check_finite(x_t)
    flat = x_t.reshape(-1, x_t.shape[-1])
    betas = np.full(flat.shape[0], sched.beta_at(t))
    out, _ = model.forward(flat, betas)
    return out.astype(np.float64).reshape(x_t.shape)


class AdamOptimizer:
    """Adam with bias correction over a dict of named parameters."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, grad in grads.items():
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[name] -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def _iter_minibatches(num_examples: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(num_examples)
    for start in range(0, num_examples, batch_size):
        yield order[start:start + batch_size]


def train_denoiser(
    model: ToyDenoiser,
    dataset: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    progress: bool = False,
) -> Tuple[ToyDenoiser, List[float]]:
    """
    Train with the denoising score matching objective (eps-MSE, uniform t, lambda = 1).

    Args:
        model: Denoiser to update in place
        dataset: Waveforms (N, L) with L >= cfg.segment_length
        sched: Noise schedule used to draw x_t
        cfg: Optimizer and batching settings

    Returns:
        The trained model and the per-step loss history

    Raises:
        TrainingDivergedError: If the loss becomes NaN/Inf
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    num_examples, length = dataset.shape
    if length < cfg.segment_length:
        raise ValueError(f"Dataset examples have {length} samples, need segment_length={cfg.segment_length}")
    if model.schedule.params() != sched.params():
        raise ValueError("Model schedule does not match the training schedule")

    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)
    steps_per_epoch = math.ceil(num_examples / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    logger.info(f"Training for {total_steps} steps ({num_examples} examples, batch {cfg.batch_size})")
    history: List[float] = []
    bar = tqdm(total=total_steps, desc="Training", disable=not progress)
    try:
        for epoch in range(cfg.epochs):
            for batch_idx in _iter_minibatches(num_examples, cfg.batch_size, rng):
                if len(history) >= total_steps:
                    break
                offsets = rng.integers(0, length - cfg.segment_length + 1, size=batch_idx.size)
                x0 = np.stack([dataset[i, o:o + cfg.segment_length] for i, o in zip(batch_idx, offsets)])
                steps = rng.integers(1, sched.num_steps + 1, size=batch_idx.size)
                eps = rng.standard_normal(x0.shape)
                abar = sched.alpha_bars[steps - 1][:, None]
                x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps

                loss, grads = model.loss_and_grads(x_t, steps, eps)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"Loss diverged at step {len(history) + 1} (epoch {epoch + 1}): {loss}", history
                    )
                optimizer.step(model.params, grads)
                history.append(loss)
                bar.update(1)
                if cfg.log_every and len(history) % cfg.log_every == 0:
                    recent = float(np.mean(history[-cfg.log_every:]))
                    logger.info(f"step {len(history)}: mean loss {recent:.4f}")
    finally:
        bar.close()

    logger.info(f"Training finished after {len(history)} steps")
    return model, history


def smoothed(history: Sequence[float], window: int = 100) -> np.ndarray:
    """Moving average of a loss history (valid part only)."""
    values = np.asarray(history, dtype=np.float64)
    window = max(1, min(window, values.size))
    return np.convolve(values, np.ones(window) / window, mode="valid")
