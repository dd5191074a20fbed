"""Influence estimation with compressed per-example gradients."""

__version__ = "0.1.0"

