"""Amortized factor inference networks."""

__version__ = "0.1.0"
