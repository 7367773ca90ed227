"""Continual learning with EWC and sampled quasi-Newton curvature."""

__version__ = "0.1.0"
