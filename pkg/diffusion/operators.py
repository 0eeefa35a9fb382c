"""
Degradation operators A for the restoration tasks.

Each operator exposes:
- apply(x): the forward degradation y = A(x)
- residual_grad(x, y): gradient of 0.5 * ||y - A(x)||^2 with respect to x
- output_shape / input_shape: shape bookkeeping between signal and observation

Operators are immutable value objects; apply and residual_grad are pure.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy import optimize
from scipy.signal import fftconvolve

from utils.dsp_utils import (
    StftConfig,
    design_lowpass_fir,
    mel_filterbank,
    reflect_index,
    scatter_add,
    stft,
    stft_adjoint,
)

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class LowpassSpec:
    cutoff_hz: float = 2000.0
    sample_rate_hz: float = 16000.0
    taps: int = 129


@dataclass(frozen=True)
class ClipSpec:
    threshold: float = 0.25

    def __post_init__(self):
        if not self.threshold > 0.0:
            raise ValueError(f"Clip threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class MelSpec:
    """Mel-spectrogram settings (common neural-vocoder defaults)."""

    sample_rate_hz: float = 16000.0
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 0.0  # 0 means sample_rate / 2
    log_floor: float = 1e-5

    @property
    def fmax_hz(self) -> float:
        return self.sample_rate_hz / 2.0 if self.fmax <= 0 else self.fmax

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(n_fft=self.n_fft, hop=self.hop)


class Operator:
    """Base class for observation operators."""

    name = "operator"

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not support residual gradients")

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def input_shape(self, output_shape: Shape) -> Shape:
        return tuple(output_shape)


def residual_grad(op: Operator, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of 0.5 * ||y - A(x)||^2 with respect to x."""
    return op.residual_grad(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


# ---------------------------------------------------------------------------
# Lowpass (bandwidth extension)
# ---------------------------------------------------------------------------


class LowpassOperator(Operator):
    """Zero-phase windowed-sinc FIR with reflection padding; output aligned with input."""

    name = "lowpass"

    def __init__(self, spec: LowpassSpec = LowpassSpec()):
        self.spec = spec
        self.kernel = design_lowpass_fir(spec)
        self.kernel.setflags(write=False)
        self.half = spec.taps // 2

    def _check_length(self, length: int):
        if length <= self.spec.taps:
            raise ValueError(f"Signal of {length} samples must be longer than {self.spec.taps} taps")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_length(x.shape[-1])
        padded = x[..., reflect_index(x.shape[-1], self.half)]
        kernel = self.kernel.reshape((1,) * (x.ndim - 1) + (-1,))
        return fftconvolve(padded, kernel, mode="valid", axes=-1)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        length = r.shape[-1]
        kernel = self.kernel.reshape((1,) * (r.ndim - 1) + (-1,))
        # valid correlation -> full convolution, then fold the reflected edges back
        padded_grad = fftconvolve(r, kernel, mode="full", axes=-1)
        return scatter_add(padded_grad, reflect_index(length, self.half), length)

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.adjoint(self.apply(x) - y)


def lowpass_apply(x: np.ndarray, spec: LowpassSpec) -> np.ndarray:
    return LowpassOperator(spec).apply(x)


def passband_edge_hz(spec: LowpassSpec) -> float:
    """Upper edge of the flat passband (cutoff minus the Hann transition half-width)."""
    return max(spec.cutoff_hz - 2.0 * spec.sample_rate_hz / spec.taps, 0.0)


# ---------------------------------------------------------------------------
# Clipping (declipping)
# ---------------------------------------------------------------------------


class ClipOperator(Operator):
    name = "clip"

    def __init__(self, spec: ClipSpec = ClipSpec()):
        self.spec = spec

    def apply(self, x: np.ndarray) -> np.ndarray:
        return clip_apply(x, self.spec)

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # Flat outside (-c, c); subgradient at |x| = c taken as 0
        x = np.asarray(x, dtype=np.float64)
        mask = np.abs(x) < self.spec.threshold
        return np.where(mask, self.apply(x) - y, 0.0)


def clip_apply(x: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Hard clipping 0.5 * (|x + c| - |x - c|); samples with |x| <= c pass through unchanged."""
    c = spec.threshold
    return np.clip(np.asarray(x, dtype=np.float64), -c, c)


def signal_to_distortion_db(x: np.ndarray, distorted: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    err = np.sum((x - distorted) ** 2)
    return float(10.0 * np.log10(np.sum(x ** 2) / max(err, 1e-300)))


def clip_threshold_for_sdr(x: np.ndarray, target_sdr_db: float) -> float:
    """
    Find the clipping threshold c giving the requested input SDR.

    Args:
        x: Clean signal
        target_sdr_db: Desired 10*log10(||x||^2 / ||x - clip(x)||^2)

    Returns:
        Threshold c in (0, max|x|)
    """
    x = np.asarray(x, dtype=np.float64)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        raise ValueError("Cannot clip a silent signal to a target SDR")

    def excess(c: float) -> float:
        return signal_to_distortion_db(x, clip_apply(x, ClipSpec(c))) - target_sdr_db

    lo, hi = peak * 1e-6, peak * (1.0 - 1e-9)
    if excess(lo) > 0:
        raise ValueError(f"Target SDR {target_sdr_db} dB is below the floor reachable by clipping")
    if excess(hi) < 0:
        return hi
    return float(optimize.brentq(excess, lo, hi, xtol=1e-12))


# ---------------------------------------------------------------------------
# Mel spectrogram (vocoding)
# ---------------------------------------------------------------------------


class MelOperator(Operator):
    """Log-mel spectrogram log(max(M |STFT(x)|, floor))."""

    name = "mel"

    def __init__(self, spec: MelSpec = MelSpec()):
        self.spec = spec
        self.stft_cfg = spec.stft_config

    @cached_property
    def filterbank(self) -> np.ndarray:
        fb = mel_filterbank(
            self.spec.n_mels, self.spec.n_fft, self.spec.sample_rate_hz, self.spec.fmin, self.spec.fmax_hz
        )
        fb.setflags(write=False)
        return fb

    def _check_length(self, length: int):
        if length < self.spec.n_fft:
            raise ValueError(f"Signal of {length} samples is shorter than one frame ({self.spec.n_fft})")

    def output_shape(self, input_shape: Shape) -> Shape:
        *lead, length = input_shape
        return tuple(lead) + (self.spec.n_mels, self.stft_cfg.num_frames(length))

    def input_shape(self, output_shape: Shape) -> Shape:
        *lead, _, frames = output_shape
        return tuple(lead) + (self.stft_cfg.signal_length(frames),)

    def _forward(self, x: np.ndarray):
        spec = stft(x, self.stft_cfg)
        magnitude = np.abs(spec)
        power = np.matmul(self.filterbank, magnitude)
        return spec, magnitude, power

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_length(x.shape[-1])
        _, _, mel = self._forward(x)
        return np.log(np.maximum(mel, self.spec.log_floor))

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_length(x.shape[-1])
        spec, magnitude, mel = self._forward(x)
        above = mel > self.spec.log_floor
        log_mel = np.log(np.where(above, mel, self.spec.log_floor))

        # d/d mel of 0.5 * ||y - log mel||^2, zero where the floor is active
        g_mel = np.where(above, (log_mel - y) / np.where(above, mel, 1.0), 0.0)
        g_mag = np.matmul(self.filterbank.T, g_mel)
        safe = np.where(magnitude > 0, magnitude, 1.0)
        g_spec = np.where(magnitude > 0, g_mag / safe, 0.0) * spec
        return stft_adjoint(g_spec, self.stft_cfg, x.shape[-1])


def mel_apply(x: np.ndarray, spec: MelSpec) -> np.ndarray:
    return MelOperator(spec).apply(x)


# ---------------------------------------------------------------------------
# Mixing (source separation) and generic linear maps
# ---------------------------------------------------------------------------


class MixOperator(Operator):
    """y = x1 + x2 over a stacked state of shape (..., 2, L)."""

    name = "mix"

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2] != 2:
            raise ValueError(f"Mix operator expects a stacked (..., 2, L) state, got {x.shape}")
        return x[..., 0, :] + x[..., 1, :]

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        residual = self.apply(x) - y
        return np.stack([residual, residual], axis=-2)

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape[:-2]) + (input_shape[-1],)

    def input_shape(self, output_shape: Shape) -> Shape:
        return tuple(output_shape[:-1]) + (2, output_shape[-1])


def mix_apply(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"Sources must have equal shapes, got {x1.shape} and {x2.shape}")
    return x1 + x2


@dataclass(frozen=True, eq=False)
class MatrixOperator(Operator):
    """Linear operator y = A x acting on the last axis (e.g. coordinate selection)."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(1))
    name = "matrix"

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def residual_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (self.apply(x) - y) @ self.matrix

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape[:-1]) + (self.matrix.shape[0],)

    def input_shape(self, output_shape: Shape) -> Shape:
        return tuple(output_shape[:-1]) + (self.matrix.shape[1],)


def selection_matrix(dim: int, observed: np.ndarray) -> np.ndarray:
    """Rows of the identity for the observed coordinates."""
    return np.eye(dim)[np.asarray(observed, dtype=int)]
