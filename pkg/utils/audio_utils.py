"""
Audio utilities for diffrestore.

Provides shared functionality for:
- Synthetic datasets (toy harmonics, AR(1) and quasi-periodic Gaussian processes)
- 16-bit PCM mono WAV reading/writing
- Two-source mixing
- Log-mel tensor files
"""

import logging
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import soundfile as sf
from scipy import signal as sps
from scipy.linalg import toeplitz

from diffusion.exceptions import WaveformFormatError
from diffusion.score_models import GaussianPrior

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0
DEFAULT_PEAK = 0.95
MEL_MAGIC = b"MELT"
MEL_VERSION = 1

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyHarmonicConfig:
    sample_rate: int = 16000
    duration: float = 1.0
    f0_min: float = 80.0
    f0_max: float = 300.0
    harmonics_min: int = 1
    harmonics_max: int = 5
    noise_floor: float = 0.01
    peak: float = DEFAULT_PEAK
    seed: int = 0

    @property
    def length(self) -> int:
        return int(round(self.sample_rate * self.duration))

    def validate(self):
        if self.length < 2:
            raise ValueError(f"duration {self.duration}s gives fewer than 2 samples")
        if not 0 < self.f0_min <= self.f0_max:
            raise ValueError(f"f0 range must satisfy 0 < f0_min <= f0_max, got [{self.f0_min}, {self.f0_max}]")
        if not 1 <= self.harmonics_min <= self.harmonics_max:
            raise ValueError(
                f"harmonics must satisfy 1 <= min <= max, got [{self.harmonics_min}, {self.harmonics_max}]"
            )
        if self.f0_max * self.harmonics_max >= self.sample_rate / 2:
            raise ValueError(
                f"f0_max * harmonics_max = {self.f0_max * self.harmonics_max} Hz reaches Nyquist "
                f"({self.sample_rate / 2} Hz)"
            )
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be >= 0")


def gen_toy_harmonic(cfg: ToyHarmonicConfig, n: int, return_f0: bool = False):
    """
    Generate n toy voiced waveforms.

    Each example is sum_k (1/k) sin(2 pi k f0 t + phi_k) under a Hann envelope,
    plus white noise of std noise_floor, then peak-normalized to cfg.peak.

    Returns:
        Array (n, L); with return_f0 also the (n,) array of fundamentals
    """
    cfg.validate()
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")

    rng = np.random.default_rng(cfg.seed)
    length = cfg.length
    t = np.arange(length) / cfg.sample_rate
    envelope = sps.get_window("hann", length, fftbins=False)

    waves = np.empty((n, length))
    f0s = np.empty(n)
    for i in range(n):
        f0 = rng.uniform(cfg.f0_min, cfg.f0_max)
        num_harmonics = int(rng.integers(cfg.harmonics_min, cfg.harmonics_max + 1))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=num_harmonics)
        k = np.arange(1, num_harmonics + 1)[:, None]
        tone = np.sum(np.sin(2.0 * np.pi * k * f0 * t + phases[:, None]) / k, axis=0)
        x = tone * envelope + cfg.noise_floor * rng.standard_normal(length)
        waves[i] = cfg.peak * x / np.max(np.abs(x))
        f0s[i] = f0

    logger.debug(f"Generated {n} toy harmonic examples of {length} samples")
    return (waves, f0s) if return_f0 else waves


@dataclass(frozen=True)
class Ar1Config:
    rho: float = 0.9
    length: int = 32
    seed: int = 0

    def validate(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"AR(1) correlation must lie in (-1, 1), got {self.rho}")
        if self.length < 1:
            raise ValueError(f"length must be positive, got {self.length}")


def ar1_covariance(rho: float, length: int) -> np.ndarray:
    return toeplitz(rho ** np.arange(length))


def gen_ar1(cfg: Ar1Config, n: int) -> Tuple[np.ndarray, GaussianPrior]:
    """
    Stationary AR(1) vectors with unit marginal variance.

    Returns:
        Samples (n, length) and the exact prior N(0, rho^|i-j|)
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    innovations = rng.standard_normal((n, cfg.length))
    innovations[:, 1:] *= np.sqrt(1.0 - cfg.rho ** 2)
    samples = sps.lfilter([1.0], [1.0, -cfg.rho], innovations, axis=-1)
    prior = GaussianPrior(np.zeros(cfg.length), ar1_covariance(cfg.rho, cfg.length))
    return samples, prior


@dataclass(frozen=True)
class HarmonicGpConfig:
    """Quasi-periodic Gaussian process: harmonic cosine kernel damped by rho^|lag|."""

    length: int = 1024
    sample_rate: int = 16000
    f0: float = 250.0
    harmonics: int = 6
    rho: float = 0.99
    jitter: float = 1e-6
    seed: int = 0

    def validate(self):
        if self.f0 * self.harmonics >= self.sample_rate / 2:
            raise ValueError(f"f0 * harmonics = {self.f0 * self.harmonics} Hz reaches Nyquist")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.length < 1 or self.harmonics < 1:
            raise ValueError("length and harmonics must be positive")
        if not 0.0 < self.jitter < 1.0:
            raise ValueError(f"jitter must lie in (0, 1), got {self.jitter}")


def harmonic_gp_covariance(cfg: HarmonicGpConfig) -> np.ndarray:
    lags = np.arange(cfg.length)
    k = np.arange(1, cfg.harmonics + 1)
    weights = 1.0 / k ** 2
    weights /= weights.sum()
    kernel = weights @ np.cos(2.0 * np.pi * np.outer(k, lags) * cfg.f0 / cfg.sample_rate)
    kernel = kernel * cfg.rho ** lags
    kernel[0] = 1.0
    # Keep the diagonal at exactly 1 while bounding the condition number
    return (1.0 - cfg.jitter) * toeplitz(kernel) + cfg.jitter * np.eye(cfg.length)


def gen_harmonic_gp(cfg: HarmonicGpConfig, n: int) -> Tuple[np.ndarray, GaussianPrior]:
    """Samples from the quasi-periodic Gaussian prior and the prior itself."""
    cfg.validate()
    prior = GaussianPrior(np.zeros(cfg.length), harmonic_gp_covariance(cfg))
    samples = prior.sample(np.random.default_rng(cfg.seed), n)
    return samples, prior


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return self.samples.shape[-1] / self.sample_rate


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round-to-nearest PCM16 code of samples scaled by 32768, saturated to the int16 range."""
    codes = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(codes, -32768, 32767).astype(np.int16)


def wav_write(path: PathLike, waveform: Waveform) -> Path:
    """Write a mono waveform as 16-bit PCM WAV."""
    path = Path(path)
    samples = np.asarray(waveform.samples)
    if samples.ndim != 1:
        raise WaveformFormatError(f"Only mono waveforms can be written, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise WaveformFormatError(f"Refusing to write non-finite samples to {path}")
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        logger.warning(f"Clipping {path.name}: peak {peak:.3f} exceeds full scale")

    sf.write(str(path), quantize_pcm16(samples), int(waveform.sample_rate), subtype="PCM_16", format="WAV")
    return path


def wav_read(path: PathLike) -> Waveform:
    """
    Read a 16-bit PCM mono WAV scaled to [-1, 1).

    Raises:
        WaveformFormatError: For non-WAV files, other sample formats, multichannel
            audio, or files whose data chunk is truncated
        FileNotFoundError: If the file does not exist
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")

    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise WaveformFormatError(f"{path}: not a readable WAV file ({e})") from e

    if info.format != "WAV":
        raise WaveformFormatError(f"{path}: expected a RIFF/WAVE file, got {info.format}")
    if info.subtype != "PCM_16":
        raise WaveformFormatError(f"{path}: expected 16-bit PCM samples, got {info.subtype}")
    if info.channels != 1:
        raise WaveformFormatError(f"{path}: expected mono audio, got {info.channels} channels")

    try:
        with wave.open(str(path), "rb") as header:
            declared_frames = header.getnframes()
    except (wave.Error, EOFError) as e:
        raise WaveformFormatError(f"{path}: malformed WAV header ({e})") from e
    if declared_frames != info.frames:
        raise WaveformFormatError(
            f"{path}: truncated data chunk ({info.frames} of {declared_frames} frames present)"
        )

    codes, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    return Waveform(samples=codes.astype(np.float64) / PCM16_SCALE, sample_rate=int(sample_rate))


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureRecord:
    gain1: float
    gain2: float
    peak: float = DEFAULT_PEAK


def peak_normalize(x: np.ndarray, peak: float = DEFAULT_PEAK) -> Tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=np.float64)
    current = float(np.max(np.abs(x))) if x.size else 0.0
    if current == 0.0:
        raise ValueError("Cannot normalize a silent source")
    gain = peak / current
    return x * gain, gain


def make_mixture(x1: np.ndarray, x2: np.ndarray, peak: float = DEFAULT_PEAK) -> Tuple[np.ndarray, MixtureRecord]:
    """
    Peak-normalize both sources to `peak` and add them without weights.

    Returns:
        The mixture and the gains applied to each source
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"Sources must have equal lengths, got {x1.shape} and {x2.shape}")
    s1, gain1 = peak_normalize(x1, peak)
    s2, gain2 = peak_normalize(x2, peak)
    return s1 + s2, MixtureRecord(gain1=gain1, gain2=gain2, peak=peak)


# ---------------------------------------------------------------------------
# Mel tensor files
# ---------------------------------------------------------------------------


def write_mel_tensor(path: PathLike, mel: np.ndarray) -> Path:
    """Write `MELT`, uint32 version, uint32 ndim, uint32 dims, then little-endian float32 values."""
    path = Path(path)
    mel = np.asarray(mel)
    header = np.array([MEL_VERSION, mel.ndim, *mel.shape], dtype="<u4")
    with path.open("wb") as f:
        f.write(MEL_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(mel, dtype="<f4").tobytes())
    return path


def read_mel_tensor(path: PathLike) -> np.ndarray:
    """
    Raises:
        WaveformFormatError: On a bad magic, unknown version or size mismatch
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MEL_MAGIC:
        raise WaveformFormatError(f"{path}: not a mel tensor file (bad magic)")
    if len(data) < 12:
        raise WaveformFormatError(f"{path}: truncated mel tensor header")

    version, ndim = np.frombuffer(data, dtype="<u4", count=2, offset=4)
    if version != MEL_VERSION:
        raise WaveformFormatError(f"{path}: unsupported mel tensor version {version}")
    header_end = 12 + 4 * int(ndim)
    if len(data) < header_end:
        raise WaveformFormatError(f"{path}: truncated mel tensor header")
    shape = tuple(int(d) for d in np.frombuffer(data, dtype="<u4", count=int(ndim), offset=12))

    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) - header_end != expected:
        raise WaveformFormatError(
            f"{path}: payload has {len(data) - header_end} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(data, dtype="<f4", offset=header_end).reshape(shape).astype(np.float64)
