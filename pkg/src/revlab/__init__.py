"""Reversal-invariance laboratory for autoregressive language models."""

__version__ = "0.1.0"
