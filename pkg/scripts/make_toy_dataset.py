#!/usr/bin/env python3
"""
Toy Dataset Script for diffrestore

Writes a directory of synthetic voiced waveforms (harmonic tones under a Hann
envelope) as 16-bit PCM mono WAV files. The directory can be passed to
`restore_cli.py train --io.input <dir>` or used as clean inputs for the
restoration commands with `--run.degrade true`.

Usage:
    python scripts/make_toy_dataset.py out/toy                   # 64 one-second examples
    python scripts/make_toy_dataset.py out/toy -n 8 --seed 3     # 8 examples, other seed
    python scripts/make_toy_dataset.py out/toy --duration 2.0 --f0-max 200
"""

import sys
import argparse
import logging
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from utils.audio_utils import ToyHarmonicConfig, Waveform, gen_toy_harmonic, wav_write

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def write_dataset(output_dir: Path, count: int, cfg: ToyHarmonicConfig) -> int:
    """
    Generate and write the dataset.

    Args:
        output_dir: Directory to create (existing files with the same names are overwritten)
        count: Number of examples
        cfg: Generator settings

    Returns:
        Exit code (0 for success, 1 for failure)
    """
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        waves, f0s = gen_toy_harmonic(cfg, count, return_f0=True)
        for i, (wave, f0) in enumerate(zip(waves, f0s)):
            path = wav_write(output_dir / f"toy_{i:04d}.wav", Waveform(samples=wave, sample_rate=cfg.sample_rate))
            logger.debug(f"{path.name}: f0 = {f0:.1f} Hz")
        logger.info(f"✅ Wrote {count} examples to {output_dir}")
        return 0
    except Exception as e:
        logger.error(f"❌ Dataset generation failed: {e}", exc_info=True)
        return 1


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(description="Write a toy harmonic WAV dataset")
    parser.add_argument("output_dir", type=Path, help="Directory for the WAV files")
    parser.add_argument("--count", "-n", type=int, default=64, help="Number of examples")
    parser.add_argument("--seed", type=int, default=0, help="Generator seed")
    parser.add_argument("--sample-rate", type=int, default=16000, help="Sample rate in Hz")
    parser.add_argument("--duration", type=float, default=1.0, help="Seconds per example")
    parser.add_argument("--f0-min", type=float, default=80.0, help="Lowest fundamental in Hz")
    parser.add_argument("--f0-max", type=float, default=300.0, help="Highest fundamental in Hz")
    parser.add_argument("--harmonics-max", type=int, default=5, help="Largest number of harmonics")
    args = parser.parse_args()

    cfg = ToyHarmonicConfig(
        sample_rate=args.sample_rate,
        duration=args.duration,
        f0_min=args.f0_min,
        f0_max=args.f0_max,
        harmonics_max=args.harmonics_max,
        seed=args.seed,
    )
    return write_dataset(args.output_dir, args.count, cfg)


if __name__ == "__main__":
    sys.exit(main())
