"""Amortized X-ray spectral fitting with a conditional spline flow."""

__version__ = "0.1.0"
