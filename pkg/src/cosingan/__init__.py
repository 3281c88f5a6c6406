"""Conditional single-image GAN pyramid for paired image/mask synthesis."""

__version__ = "0.1.0"
