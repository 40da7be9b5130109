"""Latent-action adversarial imitation learning laboratory."""

__version__ = "0.1.0"
