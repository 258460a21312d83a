"""Microscaling (MX) block quantization: formats, Monte-Carlo and analytical MSE."""

__version__ = "0.1.0"
