"""
DSP utilities for diffrestore.

Provides shared functionality for:
- STFT / iSTFT with reflect centering and window-square normalization
- The exact adjoint of the STFT (used by the mel operator's gradient)
- HTK mel filterbank construction
- Windowed-sinc FIR lowpass design
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StftConfig:
    """STFT parameters. Hann with hop = n_fft / 4 is COLA."""

    n_fft: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.n_fft < 2:
            raise ValueError(f"n_fft must be >= 2, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got hop={self.hop}, n_fft={self.n_fft}")
        if self.pad_mode != "reflect":
            raise ValueError(f"Only reflect centering is supported, got pad_mode={self.pad_mode!r}")

    @property
    def num_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, length: int) -> int:
        if self.center:
            return 1 + math.ceil(length / self.hop)
        if length < self.n_fft:
            raise ValueError(f"Signal of {length} samples is shorter than one frame ({self.n_fft})")
        return 1 + (length - self.n_fft) // self.hop

    def signal_length(self, num_frames: int) -> int:
        """Longest signal length that produces num_frames centered frames."""
        return (num_frames - 1) * self.hop


def get_stft_window(cfg: StftConfig) -> np.ndarray:
    return sps.get_window(cfg.window, cfg.n_fft, fftbins=True).astype(np.float64)


def is_cola(cfg: StftConfig) -> bool:
    return bool(sps.check_COLA(get_stft_window(cfg), cfg.n_fft, cfg.n_fft - cfg.hop))


def reflect_index(length: int, pad: int) -> np.ndarray:
    """Source index of every sample of a reflect-padded signal."""
    return np.pad(np.arange(length), pad, mode="reflect")


def scatter_add(values: np.ndarray, index: np.ndarray, length: int) -> np.ndarray:
    """
    Adjoint of ``x[..., index]``: accumulate values back onto a signal of `length`.
    """
    lead = values.shape[:-1]
    flat = values.reshape(-1, values.shape[-1])
    out = np.zeros((flat.shape[0], length), dtype=values.dtype)
    np.add.at(out, (slice(None), index), flat)
    return out.reshape(lead + (length,))


def _padding_plan(length: int, cfg: StftConfig) -> Tuple[np.ndarray, int, int]:
    """Gather index, zero tail length and frame count for a signal of `length`."""
    num_frames = cfg.num_frames(length)
    if not cfg.center:
        return np.arange(length), 0, num_frames
    index = reflect_index(length, cfg.n_fft // 2)
    padded_length = (num_frames - 1) * cfg.hop + cfg.n_fft
    return index, padded_length - index.size, num_frames


def _frames(padded: np.ndarray, cfg: StftConfig, num_frames: int) -> np.ndarray:
    view = sliding_window_view(padded, cfg.n_fft, axis=-1)[..., :: cfg.hop, :]
    return view[..., :num_frames, :]


def _overlap_add(frames: np.ndarray, hop: int, out_length: int) -> np.ndarray:
    n_fft = frames.shape[-1]
    out = np.zeros(frames.shape[:-2] + (out_length,), dtype=frames.dtype)
    for f in range(frames.shape[-2]):
        start = f * hop
        out[..., start:start + n_fft] += frames[..., f, :]
    return out


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """
    Short-time Fourier transform over the last axis.

    Args:
        x: Signal(s), shape (..., L)
        cfg: STFT configuration

    Returns:
        Complex spectrogram, shape (..., n_fft // 2 + 1, frames)
    """
    x = np.asarray(x, dtype=np.float64)
    index, tail, num_frames = _padding_plan(x.shape[-1], cfg)
    padded = x[..., index]
    if tail:
        padded = np.concatenate([padded, np.zeros(x.shape[:-1] + (tail,))], axis=-1)
    frames = _frames(padded, cfg, num_frames) * get_stft_window(cfg)
    return np.swapaxes(np.fft.rfft(frames, n=cfg.n_fft, axis=-1), -1, -2)


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: Optional[int] = None) -> np.ndarray:
    """
    Inverse STFT by overlap-add with window-square normalization.

    Args:
        spec: Complex spectrogram (..., bins, frames)
        cfg: STFT configuration (must satisfy COLA)
        length: Output length (defaults to (frames - 1) * hop when centered)

    Returns:
        Real signal(s), shape (..., length)

    Raises:
        ValueError: If the configuration is not COLA or the bin count does not match n_fft
    """
    if not is_cola(cfg):
        raise ValueError(f"STFT config {cfg} does not satisfy the constant-overlap-add condition")
    spec = np.asarray(spec)
    if spec.shape[-2] != cfg.num_bins:
        raise ValueError(f"Expected {cfg.num_bins} frequency bins, got {spec.shape[-2]}")

    num_frames = spec.shape[-1]
    window = get_stft_window(cfg)
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=cfg.n_fft, axis=-1) * window
    padded_length = (num_frames - 1) * cfg.hop + cfg.n_fft
    signal = _overlap_add(frames, cfg.hop, padded_length)
    norm = _overlap_add(np.broadcast_to(window ** 2, (num_frames, cfg.n_fft)), cfg.hop, padded_length)

    offset = cfg.n_fft // 2 if cfg.center else 0
    if length is None:
        length = cfg.signal_length(num_frames) if cfg.center else padded_length
    signal = signal[..., offset:offset + length]
    norm = norm[offset:offset + length]
    tiny = np.finfo(np.float64).tiny
    return np.where(norm > tiny, signal / np.maximum(norm, tiny), 0.0)


def stft_adjoint(grad: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """
    Adjoint of `stft` for real-valued losses.

    Given G = dL/dRe(S) + i dL/dIm(S) for S = stft(x), returns dL/dx.
    """
    grad = np.asarray(grad)
    index, tail, num_frames = _padding_plan(length, cfg)
    if grad.shape[-1] != num_frames or grad.shape[-2] != cfg.num_bins:
        raise ValueError(f"Gradient shape {grad.shape[-2:]} does not match ({cfg.num_bins}, {num_frames})")

    # One-sided spectrum: interior bins appear twice in irfft, DC/Nyquist once
    half = np.swapaxes(grad, -1, -2).copy()
    last = -1 if cfg.n_fft % 2 == 0 else None
    half[..., 1:last] *= 0.5
    frames = np.fft.irfft(half, n=cfg.n_fft, axis=-1) * cfg.n_fft * get_stft_window(cfg)

    padded = _overlap_add(frames, cfg.hop, index.size + tail)
    return scatter_add(padded[..., : index.size], index, length)


def mel_filterbank(
    n_mels: int,
    n_fft: int,
    sample_rate: float,
    fmin: float = 0.0,
    fmax: Optional[float] = None,
) -> np.ndarray:
    """
    Triangular HTK mel filterbank with unit peaks (no area normalization).

    Returns:
        Matrix of shape (n_mels, n_fft // 2 + 1)
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    if not 0.0 <= fmin < fmax <= sample_rate / 2.0:
        raise ValueError(f"Invalid mel band [{fmin}, {fmax}] for sample rate {sample_rate}")
    if n_mels < 1:
        raise ValueError(f"n_mels must be positive, got {n_mels}")

    return librosa.filters.mel(
        sr=sample_rate,
        n_fft=n_fft,
        n_mels=n_mels,
        fmin=fmin,
        fmax=fmax,
        htk=True,
        norm=None,
        dtype=np.float64,
    )


def design_lowpass_fir(spec) -> np.ndarray:
    """
    Hann-windowed sinc lowpass kernel with unity DC gain.

    Args:
        spec: Object with cutoff_hz, sample_rate_hz and taps (see operators.LowpassSpec)

    Returns:
        Symmetric kernel of length spec.taps
    """
    if spec.taps < 3 or spec.taps % 2 == 0:
        raise ValueError(f"taps must be an odd integer >= 3, got {spec.taps}")
    if not 0.0 < spec.cutoff_hz < spec.sample_rate_hz / 2.0:
        raise ValueError(
            f"cutoff_hz must lie in (0, {spec.sample_rate_hz / 2.0}), got {spec.cutoff_hz}"
        )

    kernel = sps.firwin(spec.taps, spec.cutoff_hz, window="hann", fs=spec.sample_rate_hz)
    kernel = 0.5 * (kernel + kernel[::-1])
    return kernel / kernel.sum()


def frequency_response_db(kernel: np.ndarray, freqs_hz: np.ndarray, sample_rate: float) -> np.ndarray:
    """Magnitude response of an FIR kernel in dB at the given frequencies."""
    _, response = sps.freqz(kernel, worN=np.atleast_1d(freqs_hz), fs=sample_rate)
    return 20.0 * np.log10(np.maximum(np.abs(response), 1e-300))
