"""Cloth physical-parameter estimation from depth sequences."""

__version__ = "0.1.0"
