"""
Run configuration for diffrestore.

Provides shared functionality for:
- The INI schema (sections, keys, defaults) used by every command
- Loading a config file and applying dotted command-line overrides
- Building the typed settings objects consumed by the library
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from diffusion.exceptions import ConfigError
from diffusion.guidance import GuidanceConfig
from diffusion.operators import ClipSpec, LowpassSpec, MelSpec
from diffusion.denoiser import TrainConfig
from diffusion.schedule import NoiseSchedule, make_linear_schedule
from utils.audio_utils import ToyHarmonicConfig
from utils.dsp_utils import design_lowpass_fir

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "DIFFRESTORE_LOG_LEVEL"

# section -> key -> default; the default's type is the key's type
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {
        "seed": 0,
        "output_dir": "out",
        "log_level": "INFO",
        "eval": True,
        "degrade": False,
        "progress": True,
        "eval_crop_seconds": 0.0,
    },
    "schedule": {"num_steps": 200, "beta_min": 0.0001, "beta_max": 0.02},
    "model": {
        "checkpoint": "model.npz",
        "channels": 32,
        "blocks": 8,
        "fourier_features": 16,
        "fourier_scale": 100.0,
        "precision": "float32",
    },
    "train": {
        "learning_rate": 0.0002,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "batch_size": 8,
        "segment_seconds": 0.5,
        "epochs": 1,
        "max_steps": 0,
        "num_examples": 64,
    },
    "data": {
        "sample_rate": 16000,
        "duration": 1.0,
        "f0_min": 80.0,
        "f0_max": 300.0,
        "harmonics_min": 1,
        "harmonics_max": 5,
        "noise_floor": 0.01,
    },
    "io": {"input": "", "input2": "", "reference": "", "reference2": ""},
    "lowpass": {"cutoff_hz": 2000.0, "taps": 129},
    "clip": {"c": 0.25, "target_sdr_db": 0.0},
    "mel": {"n_fft": 1024, "hop": 256, "n_mels": 80, "fmin": 0.0, "fmax": 0.0, "log_floor": 1e-5},
    "guidance": {
        "mode": "auto",
        "xi0": 1.0,
        "norm_eps": 1e-8,
        "variance": "beta_tilde",
        "separation": "analytic",
        "xi_scaling": "noise_level",
        "num_chains": 1,
        "trace_every": 0,
    },
    "sample": {"count": 4, "seconds": 0.5},
    "oracle": {"quick": False},
}

_BOOLEAN_STATES = configparser.ConfigParser.BOOLEAN_STATES


def _convert(section: str, key: str, raw: Any) -> Any:
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in _BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOLEAN_STATES[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e
    return text


@dataclass
class RunConfig:
    """Typed view over the INI sections."""

    values: Dict[str, Dict[str, Any]] = field(
        default_factory=lambda: {section: dict(keys) for section, keys in DEFAULTS.items()}
    )

    def get(self, dotted: str) -> Any:
        section, key = _split_key(dotted)
        return self.values[section][key]

    def set(self, dotted: str, raw: Any):
        section, key = _split_key(dotted)
        self.values[section][key] = _convert(section, key, raw)

    def section(self, name: str) -> Dict[str, Any]:
        if name not in self.values:
            raise ConfigError(f"Unknown config section [{name}]")
        return dict(self.values[name])

    def path(self, dotted: str) -> Optional[Path]:
        value = self.get(dotted)
        return Path(value) if value else None

    # -- typed settings ----------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def sample_rate(self) -> int:
        return self.values["data"]["sample_rate"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run"]["output_dir"])

    def schedule(self) -> NoiseSchedule:
        s = self.values["schedule"]
        return make_linear_schedule(s["num_steps"], s["beta_min"], s["beta_max"])

    def lowpass_spec(self) -> LowpassSpec:
        s = self.values["lowpass"]
        return LowpassSpec(cutoff_hz=s["cutoff_hz"], sample_rate_hz=float(self.sample_rate), taps=s["taps"])

    def clip_spec(self) -> ClipSpec:
        return ClipSpec(threshold=self.values["clip"]["c"])

    def mel_spec(self) -> MelSpec:
        s = self.values["mel"]
        return MelSpec(
            sample_rate_hz=float(self.sample_rate),
            n_fft=s["n_fft"],
            hop=s["hop"],
            n_mels=s["n_mels"],
            fmin=s["fmin"],
            fmax=s["fmax"],
            log_floor=s["log_floor"],
        )

    def guidance_config(self) -> GuidanceConfig:
        s = self.values["guidance"]
        return GuidanceConfig(
            mode=s["mode"],
            xi0=s["xi0"],
            norm_eps=s["norm_eps"],
            seed=self.seed,
            variance=s["variance"],
            separation=s["separation"],
            xi_scaling=s["xi_scaling"],
            trace_every=s["trace_every"],
        )

    def train_config(self) -> TrainConfig:
        s = self.values["train"]
        return TrainConfig(
            learning_rate=s["learning_rate"],
            adam_beta1=s["adam_beta1"],
            adam_beta2=s["adam_beta2"],
            batch_size=s["batch_size"],
            segment_length=int(round(s["segment_seconds"] * self.sample_rate)),
            epochs=s["epochs"],
            seed=self.seed,
            max_steps=s["max_steps"],
        )

    def toy_config(self) -> ToyHarmonicConfig:
        s = self.values["data"]
        return ToyHarmonicConfig(
            sample_rate=s["sample_rate"],
            duration=s["duration"],
            f0_min=s["f0_min"],
            f0_max=s["f0_max"],
            harmonics_min=s["harmonics_min"],
            harmonics_max=s["harmonics_max"],
            noise_floor=s["noise_floor"],
            seed=self.seed,
        )

    def log_level(self) -> str:
        return os.getenv(LOG_LEVEL_ENV, self.values["run"]["log_level"]).upper()

    def validate(self):
        """
        Build every settings object once so bad values fail before any work starts.

        Raises:
            ConfigError: On any invalid value
        """
        builders = (
            self.schedule,
            self.lowpass_spec,
            self.clip_spec,
            lambda: self.mel_spec().stft_config,
            self.guidance_config,
            self.train_config,
            self.toy_config,
        )
        try:
            for build in builders:
                build()
            self.toy_config().validate()
            design_lowpass_fir(self.lowpass_spec())
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

        if self.values["model"]["precision"] not in ("float32", "float64"):
            raise ConfigError(f"model.precision must be float32 or float64, got {self.values['model']['precision']!r}")
        if self.values["guidance"]["num_chains"] < 1:
            raise ConfigError("guidance.num_chains must be >= 1")
        if self.values["sample"]["count"] < 1 or self.values["sample"]["seconds"] <= 0:
            raise ConfigError("sample.count and sample.seconds must be positive")
        if self.values["clip"]["target_sdr_db"] < 0:
            raise ConfigError("clip.target_sdr_db must be >= 0 (0 uses clip.c)")
        if not isinstance(logging.getLevelName(self.log_level()), int):
            raise ConfigError(f"Unknown log level {self.log_level()!r}")
        if self.values["run"]["eval_crop_seconds"] < 0:
            raise ConfigError("run.eval_crop_seconds must be >= 0")

    def to_ini(self) -> str:
        """Effective settings in the same INI layout load_run_config reads."""
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_format(value)}" for key, value in keys.items())
            lines.append("")
        return "\n".join(lines)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _split_key(dotted: str):
    section, sep, key = dotted.partition(".")
    if not sep or section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"Unknown config key {dotted!r}")
    return section, key


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Load an INI file (optional) and apply dotted overrides on top.

    Args:
        path: INI file with [section] headers and key = value lines
        overrides: Mapping like {"guidance.xi0": "2.5"}; None values are skipped

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unknown sections/keys, unparsable values or a missing file
    """
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"Unknown config section [{section}] in {path}")
            for key, raw in parser[section].items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"Unknown config key {section}.{key} in {path}")
                config.set(f"{section}.{key}", raw)
        logger.debug(f"Loaded config from {path}")

    for dotted, raw in (overrides or {}).items():
        if raw is not None:
            config.set(dotted, raw)

    config.validate()
    return config


def config_keys():
    """All dotted keys with their defaults, in schema order."""
    for section, keys in DEFAULTS.items():
        for key, default in keys.items():
            yield f"{section}.{key}", default
