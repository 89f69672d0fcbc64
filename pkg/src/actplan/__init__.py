"""Activation memory planning for long-context transformer training."""

__version__ = "0.1.0"
