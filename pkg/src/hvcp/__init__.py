"""Probabilistic shape completion with hierarchical latent CP factors."""

__version__ = "0.1.0"
