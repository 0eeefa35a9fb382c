"""
Objective evaluation metrics.

- si_snr: scale-invariant SNR in dB, capped at +100 dB
- lsd: log-spectral distance on log10 power spectra
- si_snr_best_permutation: order-free scoring of two separated sources
- mel_log_error: mean absolute log-mel difference for vocoding
- MetricReport: record written by the CLI's eval step
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from utils.dsp_utils import StftConfig, stft

logger = logging.getLogger(__name__)

SI_SNR_EPS = 1e-12
SI_SNR_CAP_DB = 100.0
LSD_MAGNITUDE_FLOOR = 1e-8


def _pair(reference: np.ndarray, estimate: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"Reference and estimate shapes differ: {reference.shape} vs {estimate.shape}")
    return reference, estimate


def si_snr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """
    Scale-invariant SNR in dB.

    Both signals are made zero-mean, the estimate is projected onto the
    reference, and the target-to-residual power ratio is returned.

    Raises:
        ValueError: If the reference is silent or the lengths differ
    """
    reference, estimate = _pair(reference, estimate)
    reference = reference - reference.mean()
    estimate = estimate - estimate.mean()
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise ValueError("SI-SNR is undefined for a silent reference")

    target = np.dot(estimate, reference) / ref_energy * reference
    noise = estimate - target
    ratio = np.dot(target, target) / (np.dot(noise, noise) + SI_SNR_EPS)
    if ratio <= 0.0:
        return -SI_SNR_CAP_DB
    return float(min(10.0 * np.log10(ratio), SI_SNR_CAP_DB))


def log_power_spectrum(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    magnitude = np.maximum(np.abs(stft(x, cfg)), LSD_MAGNITUDE_FLOOR)
    return 2.0 * np.log10(magnitude)


def lsd(
    reference: np.ndarray,
    estimate: np.ndarray,
    cfg: StftConfig = StftConfig(),
    max_freq_hz: Optional[float] = None,
    sample_rate: float = 16000.0,
) -> float:
    """
    Log-spectral distance: mean over frames of the RMS over bins of the log10 power difference.

    Args:
        reference: Clean waveform
        estimate: Waveform to score, same length
        cfg: STFT configuration
        max_freq_hz: If set, restrict to bins at or below this frequency (low-band LSD)
        sample_rate: Used only with max_freq_hz

    Raises:
        ValueError: If the input is shorter than one frame
    """
    reference, estimate = _pair(reference, estimate)
    if reference.shape[-1] < cfg.n_fft:
        raise ValueError(f"LSD needs at least {cfg.n_fft} samples, got {reference.shape[-1]}")

    diff = log_power_spectrum(reference, cfg) - log_power_spectrum(estimate, cfg)
    if max_freq_hz is not None:
        freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / sample_rate)
        diff = diff[..., freqs <= max_freq_hz, :]
        if diff.shape[-2] == 0:
            raise ValueError(f"No frequency bins at or below {max_freq_hz} Hz")
    per_frame = np.sqrt(np.mean(diff ** 2, axis=-2))
    return float(np.mean(per_frame))


def si_snr_best_permutation(
    refs: Sequence[np.ndarray], ests: Sequence[np.ndarray]
) -> Tuple[Tuple[int, int], float]:
    """
    Score two estimates against two references under both pairings.

    Returns:
        (permutation, mean SI-SNR) where ests[permutation[i]] is matched to refs[i]
    """
    if len(refs) != 2 or len(ests) != 2:
        raise ValueError("Permutation scoring expects exactly two references and two estimates")

    best_perm, best_score = (0, 1), -np.inf
    for perm in ((0, 1), (1, 0)):
        score = 0.5 * (si_snr(refs[0], ests[perm[0]]) + si_snr(refs[1], ests[perm[1]]))
        if score > best_score:
            best_perm, best_score = perm, score
    return best_perm, float(best_score)


def mel_log_error(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Mean absolute difference of two log-mel tensors."""
    mel_a, mel_b = _pair(mel_a, mel_b)
    return float(np.mean(np.abs(mel_a - mel_b)))


def random_crop(
    signals: Sequence[np.ndarray], crop_length: int, rng: np.random.Generator
) -> Tuple[np.ndarray, ...]:
    """Crop equally long signals at one shared random offset."""
    length = np.shape(signals[0])[-1]
    if any(np.shape(s)[-1] != length for s in signals):
        raise ValueError("All signals must share a length to be cropped together")
    if crop_length <= 0 or crop_length >= length:
        return tuple(np.asarray(s) for s in signals)
    start = int(rng.integers(0, length - crop_length + 1))
    return tuple(np.asarray(s)[..., start:start + crop_length] for s in signals)


@dataclass
class MetricReport:
    task: str
    si_snr_db: Optional[float] = None
    lsd: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def summary(self) -> str:
        parts = [f"task={self.task}"]
        if self.si_snr_db is not None:
            parts.append(f"SI-SNR={self.si_snr_db:.2f} dB")
        if self.lsd is not None:
            parts.append(f"LSD={self.lsd:.3f}")
        parts.extend(f"{k}={v:.3f}" for k, v in sorted(self.extras.items()))
        return ", ".join(parts)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        logger.info(f"Metrics written to {path}: {self.summary()}")
        return path
