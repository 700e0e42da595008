"""Trajectory-matching dataset distillation for spectrogram classifiers."""

__version__ = "0.1.0"
