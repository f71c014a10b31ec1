"""Outlier-token isolation for low-bit quantization of a toy decoder."""

__version__ = "0.1.0"
