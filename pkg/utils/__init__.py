"""Shared helpers: DSP primitives, metrics, audio I/O, run configuration and checkpoints."""
