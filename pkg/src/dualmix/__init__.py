"""Dual Gaussian-mixture trajectory forecasting with a parameter-space
denoising backbone, confidence-ranked hypotheses and calibration metrics."""

__version__ = "0.1.0"
