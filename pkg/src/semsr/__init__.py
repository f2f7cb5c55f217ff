"""Semantic-conditioned latent diffusion for 4x image super-resolution."""

__version__ = "0.1.0"
