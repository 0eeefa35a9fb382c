"""
Exception types for diffrestore.

The CLI maps these onto exit codes:
- ConfigError -> 2
- WaveformFormatError -> 3
- NumericalError (and subclasses) -> 4
"""

from typing import Any, List, Optional


class DiffRestoreError(Exception):
    """Base class for all diffrestore failures."""


class ConfigError(DiffRestoreError, ValueError):
    """Invalid run configuration (unknown key, bad value, missing path)."""


class WaveformFormatError(DiffRestoreError, ValueError):
    """Audio or tensor file that cannot be read in the supported format."""


class NumericalError(DiffRestoreError, FloatingPointError):
    """A NaN/Inf appeared during sampling or training."""


class SamplingDivergedError(NumericalError):
    """Reverse diffusion produced a non-finite state or guidance gradient."""

    def __init__(self, message: str, trace: Optional[Any] = None):
        super().__init__(message)
        self.trace = trace


class TrainingDivergedError(NumericalError):
    """Training loss became NaN/Inf."""

    def __init__(self, message: str, loss_history: Optional[List[float]] = None):
        super().__init__(message)
        self.loss_history = list(loss_history or [])
