"""Kahler-Ricci flow laboratory on symmetry-reduced toric Fano models."""

__version__ = "0.1.0"
