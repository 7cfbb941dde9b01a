"""Noise-robust GAN training, GAN-based denoising and desk-scale evaluation."""

__version__ = "0.1.0"
