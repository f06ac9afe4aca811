"""Desk-scale HOI detection pipeline on a pluggable latent-diffusion backbone."""

__version__ = "0.1.0"
