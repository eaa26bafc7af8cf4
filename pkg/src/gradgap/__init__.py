"""Differentiable rigid-body simulation and sim2sim reality-gap reduction."""

__version__ = "0.1.0"
