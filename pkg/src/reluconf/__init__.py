"""Piecewise-affine classifiers and their confidence far from the data."""

__version__ = "0.1.0"
