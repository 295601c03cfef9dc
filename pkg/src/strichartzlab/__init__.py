"""Numerical lab for dispersive and Strichartz estimates with signature metrics."""

__version__ = "0.1.0"
