"""Mask-guided eyeglasses removal: paired-data synthesis, dual-decoder GAN, evaluation."""

__version__ = "0.1.0"
