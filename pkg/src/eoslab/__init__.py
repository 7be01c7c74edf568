"""Desk-scale numerical lab for sharpness dynamics of gradient-flow training."""

__version__ = "0.1.0"
