"""Induced-distribution analysis of robust overfitting, at desk scale, on numpy."""

__version__ = "0.1.0"
