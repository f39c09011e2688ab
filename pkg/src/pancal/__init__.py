"""Calibration of sparse physics-augmented hyperelastic potentials."""

__version__ = "0.1.0"
