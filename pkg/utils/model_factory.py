"""
Model Factory for diffrestore

Centralizes denoiser creation and checkpoint persistence so every entry point
(CLI commands, scripts, tests) builds models the same way.

Checkpoint layout (.npz):
- params: flat float64 parameter vector in architecture order
- fourier_freqs: the fixed random Fourier feature frequencies
- meta: JSON string with format version, architecture, parameter layout and schedule
"""

import json
import zipfile
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from diffusion.denoiser import ToyDenoiser
from diffusion.exceptions import ConfigError
from diffusion.schedule import NoiseSchedule, make_linear_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def create_denoiser(
    schedule: NoiseSchedule,
    channels: int = 32,
    blocks: int = 8,
    fourier_features: int = 16,
    fourier_scale: float = 100.0,
    seed: int = 0,
    precision: str = "float32",
) -> ToyDenoiser:
    """
    Create a freshly initialized denoiser.

    Raises:
        ConfigError: If the precision name is unknown
    """
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    model = ToyDenoiser(
        schedule,
        channels=channels,
        blocks=blocks,
        fourier_features=fourier_features,
        fourier_scale=fourier_scale,
        seed=seed,
        dtype=PRECISIONS[precision],
    )
    logger.info(f"✅ Denoiser created ({model.num_parameters} parameters, {precision})")
    return model


def create_denoiser_from_config(config, schedule: NoiseSchedule) -> ToyDenoiser:
    m = config.section("model")
    return create_denoiser(
        schedule,
        channels=m["channels"],
        blocks=m["blocks"],
        fourier_features=m["fourier_features"],
        fourier_scale=m["fourier_scale"],
        seed=config.seed,
        precision=m["precision"],
    )


def save_checkpoint(path: Union[str, Path], model: ToyDenoiser) -> Path:
    """Write the model and its schedule parameters to an .npz checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.architecture(),
        "param_layout": [[name, list(shape)] for name, shape in model.param_shapes().items()],
        "schedule": model.schedule.params(),
    }
    # np.savez appends .npz to bare names; write through a handle to keep the path exact
    with path.open("wb") as f:
        np.savez(f, params=model.get_flat_params(), fourier_freqs=model.fourier_freqs, meta=np.array(json.dumps(meta)))
    logger.info(f"✅ Checkpoint written to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_schedule: Optional[NoiseSchedule] = None,
    precision: str = "float32",
) -> ToyDenoiser:
    """
    Load a denoiser checkpoint.

    Args:
        path: Checkpoint written by save_checkpoint
        expected_schedule: If given, the embedded schedule must match it
        precision: Inference dtype

    Returns:
        ToyDenoiser bound to the embedded schedule

    Raises:
        FileNotFoundError: If the checkpoint is missing
        ConfigError: If the checkpoint is malformed or its schedule differs from expected_schedule
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")

    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            flat = np.array(data["params"], dtype=np.float64)
            freqs = np.array(data["fourier_freqs"], dtype=np.float64)
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as e:
        raise ConfigError(f"{path} is not a valid checkpoint: {e}") from e

    if not isinstance(meta, dict) or meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        version = meta.get("format_version") if isinstance(meta, dict) else None
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")

    try:
        model = _model_from_meta(path, meta, flat, freqs, expected_schedule, precision)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path} is not a valid checkpoint: {e!r}") from e
    logger.info(f"✅ Loaded checkpoint {path} ({model.num_parameters} parameters)")
    return model


def _model_from_meta(
    path: Path,
    meta: dict,
    flat: np.ndarray,
    freqs: np.ndarray,
    expected_schedule: Optional[NoiseSchedule],
    precision: str,
) -> ToyDenoiser:
    sched_params = meta["schedule"]
    schedule = make_linear_schedule(sched_params["num_steps"], sched_params["beta_min"], sched_params["beta_max"])
    if expected_schedule is not None and expected_schedule.params() != schedule.params():
        raise ConfigError(
            f"Checkpoint schedule {schedule.params()} does not match requested schedule {expected_schedule.params()}"
        )

    arch = meta["architecture"]
    model = ToyDenoiser(
        schedule,
        channels=arch["channels"],
        blocks=arch["blocks"],
        fourier_features=arch["fourier_features"],
        fourier_scale=arch["fourier_scale"],
        dilation_cycle=arch["dilation_cycle"],
        seed=arch["seed"],
        dtype=PRECISIONS[precision],
        fourier_freqs=freqs,
    )
    layout = [[name, list(shape)] for name, shape in model.param_shapes().items()]
    if layout != meta["param_layout"]:
        raise ConfigError(f"{path}: parameter layout does not match the architecture")
    model.set_flat_params(flat)
    return model
