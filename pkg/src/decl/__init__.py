"""Denoising-aware contrastive self-supervised learning for noisy time series."""

__version__ = "0.1.0"
