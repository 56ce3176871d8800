"""Continual density modelling with an affine-coupling flow and a latent Gaussian mixture."""

__version__ = "0.1.0"
