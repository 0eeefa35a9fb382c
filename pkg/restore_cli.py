#!/usr/bin/env python3
"""
diffrestore command-line entry point.

Trains the toy denoiser, samples from it, and restores degraded audio by
guiding the unconditional sampler with the observation.

Commands:
    train         Train a denoiser on toy harmonics (or a directory of WAVs) and write a checkpoint
    sample        Write unconditional samples
    bwe           Bandwidth extension of a lowpassed recording
    declip        Declipping
    vocode        Waveform from a log-mel tensor
    separate      Two-source separation of a mixture
    oracle_check  Run the analytic oracle suites

Every config key can be set in an INI file (--config) and overridden by a flag
of the same dotted name.

Usage:
    python restore_cli.py train --train.max_steps 2000
    python restore_cli.py bwe --io.input clean.wav --run.degrade true --lowpass.cutoff_hz 4000
    python restore_cli.py declip --config declip.ini --guidance.xi0 20
    python restore_cli.py separate --io.input a.wav --io.input2 b.wav --run.degrade true
    python restore_cli.py oracle_check --oracle.quick true

Exit codes: 0 ok, 2 config error, 3 I/O or format error, 4 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from diffusion.denoiser import train_denoiser
from diffusion.exceptions import ConfigError, NumericalError, SamplingDivergedError, WaveformFormatError
from diffusion.guidance import GuidanceConfig, SamplerTrace, build_guidance, sample_with_guidance, solve_inverse
from diffusion.operators import (
    ClipOperator,
    ClipSpec,
    LowpassOperator,
    MelOperator,
    MelSpec,
    MixOperator,
    Operator,
    clip_threshold_for_sdr,
    passband_edge_hz,
)
from diffusion.oracles import run_oracle_suites
from utils.audio_utils import (
    Waveform,
    gen_toy_harmonic,
    make_mixture,
    read_mel_tensor,
    wav_read,
    wav_write,
    write_mel_tensor,
)
from utils.config_utils import LOG_LEVEL_ENV, RunConfig, config_keys, load_run_config
from utils.dsp_utils import StftConfig
from utils.metric_utils import MetricReport, lsd, mel_log_error, random_crop, si_snr, si_snr_best_permutation
from utils.model_factory import create_denoiser_from_config, load_checkpoint, save_checkpoint

# Set up logging
logging.basicConfig(
    level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

INFERENCE_COMMANDS = ("sample", "bwe", "declip", "vocode", "separate")
MEL_SUFFIX = ".melt"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _progress(config: RunConfig) -> bool:
    return bool(config.get("run.progress")) and sys.stderr.isatty()


def _load_model(config: RunConfig):
    return load_checkpoint(
        config.path("model.checkpoint"),
        expected_schedule=config.schedule(),
        precision=config.get("model.precision"),
    )


def _read_from(config: RunConfig, path: Path) -> np.ndarray:
    waveform = wav_read(path)
    if waveform.sample_rate != config.sample_rate:
        raise WaveformFormatError(
            f"{path}: sample rate {waveform.sample_rate} Hz differs from data.sample_rate {config.sample_rate} Hz"
        )
    return waveform.samples


def _read_input(config: RunConfig, dotted: str) -> np.ndarray:
    path = config.path(dotted)
    if path is None:
        raise ConfigError(f"{dotted} is required for this command")
    return _read_from(config, path)


def _read_optional(config: RunConfig, dotted: str) -> Optional[np.ndarray]:
    return _read_input(config, dotted) if config.path(dotted) else None


def _read_reference(config: RunConfig, dotted: str, length: int) -> Optional[np.ndarray]:
    reference = _read_optional(config, dotted)
    if reference is not None and reference.size != length:
        raise WaveformFormatError(
            f"{config.path(dotted)}: reference has {reference.size} samples, the input has {length}"
        )
    return reference


def _observe(operator: Operator, x: np.ndarray, source: Path) -> np.ndarray:
    """Apply a degradation; inputs the operator cannot take are format errors."""
    try:
        return operator.apply(x)
    except ValueError as e:
        raise WaveformFormatError(f"{source}: {e}") from e


def _check_guidance(config: RunConfig, task: str, y: np.ndarray, model, operator: Operator):
    """Bind the configured guidance mode to the task once, so a bad pairing fails before any output."""
    try:
        build_guidance(task, y, model, config.guidance_config(), operator)
    except ValueError as e:
        raise ConfigError(f"guidance.mode = {config.get('guidance.mode')} cannot run {task}: {e}") from e


def _write_run_config(config: RunConfig, command: str) -> Path:
    """Record the effective settings; commands call this once their inputs have been validated."""
    path = config.output_dir / f"{command}_config.ini"
    path.write_text(config.to_ini())
    return path


def _write(config: RunConfig, name: str, samples: np.ndarray) -> Path:
    path = config.output_dir / name
    wav_write(path, Waveform(samples=np.asarray(samples, dtype=np.float64), sample_rate=config.sample_rate))
    logger.info(f"Wrote {path}")
    return path


def _write_trace(config: RunConfig, task: str, trace: SamplerTrace) -> Path:
    return trace.to_csv(config.output_dir / f"{task}_trace.csv")


def _chain_outputs(restored: np.ndarray, single_chain_ndim: int) -> List[np.ndarray]:
    if restored.ndim == single_chain_ndim:
        return [restored]
    return list(restored)


def _write_chains(config: RunConfig, prefix: str, chains: List[np.ndarray]):
    if len(chains) == 1:
        _write(config, f"{prefix}.wav", chains[0])
        return
    for i, chain in enumerate(chains):
        _write(config, f"{prefix}_{i}.wav", chain)


def _num_chains(config: RunConfig) -> Optional[int]:
    n = config.get("guidance.num_chains")
    return None if n == 1 else n


def _eval_crop(config: RunConfig, *signals: np.ndarray):
    crop = int(round(config.get("run.eval_crop_seconds") * config.sample_rate))
    return random_crop(signals, crop, np.random.default_rng(config.seed))


def _lsd_config(length: int) -> StftConfig:
    n_fft = 1024
    while n_fft > length and n_fft > 64:
        n_fft //= 2
    return StftConfig(n_fft=n_fft, hop=n_fft // 4)


def validate_paths(command: str, config: RunConfig):
    """
    Check every path before any output is written.

    Raises:
        ConfigError: If an input is missing or the output directory cannot be created
    """
    for dotted in ("io.input", "io.input2", "io.reference", "io.reference2"):
        path = config.path(dotted)
        if path is None:
            continue
        # train accepts a directory of WAVs
        if not (path.is_file() or (command == "train" and dotted == "io.input" and path.is_dir())):
            raise ConfigError(f"{dotted} does not exist: {path}")
    if command in INFERENCE_COMMANDS:
        checkpoint = config.path("model.checkpoint")
        if checkpoint is None or not checkpoint.is_file():
            raise ConfigError(f"model.checkpoint does not exist: {checkpoint}")
        if command != "sample" and config.path("io.input") is None:
            raise ConfigError(f"io.input is required for {command}")
        if command == "separate" and config.get("run.degrade") and config.path("io.input2") is None:
            raise ConfigError("io.input2 (second source) is required to build a mixture")

    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {config.output_dir}: {e}") from e


def _finish_report(config: RunConfig, report: MetricReport) -> MetricReport:
    logger.info(f"📊 {report.summary()}")
    report.write(config.output_dir / f"{report.task}_metrics.json")
    return report


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _training_data(config: RunConfig) -> np.ndarray:
    """Toy harmonics, or every WAV in the directory given by io.input (cropped to the shortest)."""
    source = config.get("io.input")
    if source:
        folder = Path(source)
        files = sorted(folder.glob("*.wav")) if folder.is_dir() else [folder]
        if not files:
            raise ConfigError(f"No WAV files found in {folder}")
        signals = [_read_from(config, f) for f in files]
        length = min(s.size for s in signals)
        logger.info(f"Loaded {len(signals)} training files, cropped to {length} samples")
        return np.stack([s[:length] for s in signals])
    return gen_toy_harmonic(config.toy_config(), config.get("train.num_examples"))


def cmd_train(config: RunConfig) -> Path:
    """Train a denoiser and write a checkpoint plus its loss history."""
    sched = config.schedule()
    model = create_denoiser_from_config(config, sched)
    dataset = _training_data(config)
    train_cfg = config.train_config()
    if dataset.shape[-1] < train_cfg.segment_length:
        raise ConfigError(
            f"Training examples have {dataset.shape[-1]} samples, train.segment_seconds needs {train_cfg.segment_length}"
        )
    _write_run_config(config, "train")
    model, history = train_denoiser(model, dataset, sched, train_cfg, progress=_progress(config))

    checkpoint = save_checkpoint(config.path("model.checkpoint"), model)
    history_path = config.output_dir / "loss_history.csv"
    with history_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows((i + 1, repr(loss)) for i, loss in enumerate(history))
    logger.info(f"Loss history written to {history_path}")
    return checkpoint


def cmd_sample(config: RunConfig) -> List[Path]:
    """Write unconditional samples."""
    model = _load_model(config)
    count = config.get("sample.count")
    length = int(round(config.get("sample.seconds") * config.sample_rate))
    cfg = GuidanceConfig(mode="none", seed=config.seed, variance=config.get("guidance.variance"))
    _write_run_config(config, "sample")
    samples, trace = sample_with_guidance(model, model.schedule, (count, length), cfg=cfg, progress=_progress(config))
    _write_trace(config, "sample", trace)
    return [_write(config, f"sample_{i:03d}.wav", x) for i, x in enumerate(samples)]


def cmd_bwe(config: RunConfig) -> Optional[MetricReport]:
    """Bandwidth extension by low-band imputation."""
    model = _load_model(config)
    guidance = config.guidance_config()
    spec = config.lowpass_spec()
    operator = LowpassOperator(spec)
    source = config.path("io.input")
    x = _read_input(config, "io.input")
    degrade = config.get("run.degrade")
    if degrade:
        reference, y = x, _observe(operator, x, source)
    else:
        _observe(operator, x, source)
        reference, y = _read_reference(config, "io.reference", x.size), x
    _check_guidance(config, "bwe", y, model, operator)

    _write_run_config(config, "bwe")
    restored, trace = solve_inverse(
        "bwe", y, model, model.schedule, guidance, operator,
        num_chains=_num_chains(config), progress=_progress(config),
    )
    if degrade:
        _write(config, "bwe_input.wav", y)
    chains = _chain_outputs(restored, 1)
    _write_chains(config, "bwe_restored", chains)
    _write_trace(config, "bwe", trace)

    if reference is None or not config.get("run.eval"):
        return None
    ref, est, obs = _eval_crop(config, reference, chains[0], y)
    stft_cfg = _lsd_config(ref.size)
    edge = passband_edge_hz(spec)
    report = MetricReport(
        task="bwe",
        si_snr_db=si_snr(ref, est),
        lsd=lsd(ref, est, stft_cfg),
        extras={
            "lsd_low_band": lsd(ref, est, stft_cfg, max_freq_hz=edge, sample_rate=config.sample_rate),
            "input_lsd": lsd(ref, obs, stft_cfg),
            "input_si_snr_db": si_snr(ref, obs),
            "max_imputation_residual": float(np.nanmax(trace.residuals)),
        },
    )
    return _finish_report(config, report)


def cmd_declip(config: RunConfig) -> Optional[MetricReport]:
    """Declipping with reconstruction guidance."""
    model = _load_model(config)
    guidance = config.guidance_config()
    source = config.path("io.input")
    x = _read_input(config, "io.input")
    spec = config.clip_spec()
    degrade = config.get("run.degrade")
    if degrade:
        target = config.get("clip.target_sdr_db")
        if target > 0:
            try:
                spec = ClipSpec(clip_threshold_for_sdr(x, target))
            except ValueError as e:
                raise WaveformFormatError(f"{source}: {e}") from e
            logger.info(f"Clip threshold {spec.threshold:.4f} gives {target} dB input SDR")
        operator = ClipOperator(spec)
        reference, y = x, operator.apply(x)
    else:
        operator = ClipOperator(spec)
        reference, y = _read_reference(config, "io.reference", x.size), x
    _check_guidance(config, "declip", y, model, operator)

    _write_run_config(config, "declip")
    restored, trace = solve_inverse(
        "declip", y, model, model.schedule, guidance, operator,
        num_chains=_num_chains(config), progress=_progress(config),
    )
    if degrade:
        _write(config, "declip_input.wav", y)
    chains = _chain_outputs(restored, 1)
    _write_chains(config, "declip_restored", chains)
    _write_trace(config, "declip", trace)

    if reference is None or not config.get("run.eval"):
        return None
    ref, est, obs = _eval_crop(config, reference, chains[0], y)
    report = MetricReport(
        task="declip",
        si_snr_db=si_snr(ref, est),
        lsd=lsd(ref, est, _lsd_config(ref.size)),
        extras={"input_si_snr_db": si_snr(ref, obs), "clip_threshold": spec.threshold},
    )
    return _finish_report(config, report)


def _read_mel_input(path: Path, spec: MelSpec) -> np.ndarray:
    """
    Raises:
        WaveformFormatError: If the tensor is not (n_mels, frames) for the configured mel spec
    """
    y = read_mel_tensor(path)
    if y.ndim != 2 or y.shape[0] != spec.n_mels or y.shape[1] < 1:
        raise WaveformFormatError(f"{path}: mel tensor has shape {y.shape}, expected ({spec.n_mels}, frames)")
    if not np.all(np.isfinite(y)):
        raise WaveformFormatError(f"{path}: mel tensor contains NaN or Inf")
    return y


def cmd_vocode(config: RunConfig) -> Optional[MetricReport]:
    """Waveform from a log-mel tensor with reconstruction guidance."""
    source = config.path("io.input")
    from_mel = source.suffix == MEL_SUFFIX
    if not from_mel and not config.get("run.degrade"):
        raise ConfigError("vocode needs a mel tensor input, or a WAV with run.degrade = true")
    model = _load_model(config)
    guidance = config.guidance_config()
    mel_spec = config.mel_spec()
    operator = MelOperator(mel_spec)
    if from_mel:
        y = _read_mel_input(source, mel_spec)
        reference = _read_optional(config, "io.reference")
    else:
        reference = _read_input(config, "io.input")
        y = _observe(operator, reference, source)
    _check_guidance(config, "vocode", y, model, operator)

    _write_run_config(config, "vocode")
    restored, trace = solve_inverse(
        "vocode", y, model, model.schedule, guidance, operator,
        num_chains=_num_chains(config), progress=_progress(config),
    )
    if not from_mel:
        write_mel_tensor(config.output_dir / f"vocode_input{MEL_SUFFIX}", y)
    chains = _chain_outputs(restored, 1)
    _write_chains(config, "vocode_restored", chains)
    _write_trace(config, "vocode", trace)

    if not config.get("run.eval"):
        return None
    extras = {"mel_log_error": mel_log_error(operator.apply(chains[0]), y)}
    report = MetricReport(task="vocode", extras=extras)
    if reference is not None:
        length = min(reference.size, chains[0].size)
        ref, est = _eval_crop(config, reference[:length], chains[0][:length])
        report.lsd = lsd(ref, est, _lsd_config(ref.size))
    return _finish_report(config, report)


def cmd_separate(config: RunConfig) -> Optional[MetricReport]:
    """Two-source separation of a mixture."""
    model = _load_model(config)
    guidance = config.guidance_config()
    degrade = config.get("run.degrade")
    if degrade:
        x1 = _read_input(config, "io.input")
        x2 = _read_input(config, "io.input2")
        try:
            y, record = make_mixture(x1, x2)
        except ValueError as e:
            raise WaveformFormatError(f"io.input and io.input2 cannot be mixed: {e}") from e
        refs = [x1 * record.gain1, x2 * record.gain2]
    else:
        y = _read_input(config, "io.input")
        ref1 = _read_reference(config, "io.reference", y.size)
        ref2 = _read_reference(config, "io.reference2", y.size)
        refs = [ref1, ref2] if ref1 is not None and ref2 is not None else None
    _check_guidance(config, "separate", y, model, MixOperator())

    _write_run_config(config, "separate")
    restored, trace = solve_inverse(
        "separate", y, model, model.schedule, guidance,
        num_chains=_num_chains(config), progress=_progress(config),
    )
    if degrade:
        _write(config, "separate_mixture.wav", y / max(1.0, float(np.max(np.abs(y)))))
    chains = _chain_outputs(restored, 2)
    for i, pair in enumerate(chains):
        suffix = "" if len(chains) == 1 else f"_{i}"
        _write(config, f"separated{suffix}_1.wav", pair[0])
        _write(config, f"separated{suffix}_2.wav", pair[1])
    _write_trace(config, "separate", trace)

    if refs is None or not config.get("run.eval"):
        return None
    r1, r2, e1, e2, mix = _eval_crop(config, refs[0], refs[1], chains[0][0], chains[0][1], y)
    perm, score = si_snr_best_permutation([r1, r2], [e1, e2])
    report = MetricReport(
        task="separate",
        si_snr_db=score,
        extras={
            "input_si_snr_db": 0.5 * (si_snr(r1, mix) + si_snr(r2, mix)),
            "swapped": float(perm != (0, 1)),
        },
    )
    return _finish_report(config, report)


def cmd_oracle_check(config: RunConfig) -> bool:
    """Run the analytic oracle suites."""
    _write_run_config(config, "oracle_check")
    results = run_oracle_suites(quick=config.get("oracle.quick"), seed=config.seed)
    report_path = config.output_dir / "oracle_report.jsonl"
    with report_path.open("w") as f:
        for result in results:
            f.write(json.dumps(result.to_record()) + "\n")
    passed = sum(r.passed for r in results)
    logger.info(f"Oracle suites: {passed}/{len(results)} passed, report at {report_path}")
    return passed == len(results)


COMMANDS: Dict[str, Callable[[RunConfig], object]] = {
    "train": cmd_train,
    "sample": cmd_sample,
    "bwe": cmd_bwe,
    "declip": cmd_declip,
    "vocode": cmd_vocode,
    "separate": cmd_separate,
    "oracle_check": cmd_oracle_check,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="INI file with [section] key = value settings")
    for dotted, default in config_keys():
        common.add_argument(f"--{dotted}", dest=dotted, default=None, metavar=type(default).__name__.upper())

    parser = argparse.ArgumentParser(description="Diffusion-based audio restoration without task-specific training")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        summary = (func.__doc__ or name).strip().splitlines()[0]
        subparsers.add_parser(name, parents=[common], help=summary)
    return parser


def run_command(command: str, config: RunConfig) -> int:
    """
    Execute one command and map failures onto exit codes.

    Returns:
        Exit code (0 ok, 2 config, 3 I/O/format, 4 numerical)
    """
    try:
        validate_paths(command, config)
        logger.info(f"🚀 Running {command}")
        result = COMMANDS[command](config)
        if command == "oracle_check" and not result:
            logger.error("❌ Oracle suites failed")
            return EXIT_NUMERIC
        logger.info(f"✅ {command} completed successfully")
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}", exc_info=True)
        return EXIT_CONFIG
    except (WaveformFormatError, OSError) as e:
        logger.error(f"❌ I/O error: {e}", exc_info=True)
        return EXIT_IO
    except NumericalError as e:
        if isinstance(e, SamplingDivergedError) and e.trace is not None:
            try:
                _write_trace(config, f"{command}_diverged", e.trace)
            except OSError:
                pass
        logger.error(f"❌ Numerical failure: {e}", exc_info=True)
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"❌ {command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    overrides = {dotted: getattr(args, dotted) for dotted, _ in config_keys()}
    try:
        config = load_run_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    logging.getLogger().setLevel(config.log_level())
    return run_command(args.command, config)


if __name__ == "__main__":
    sys.exit(main())
