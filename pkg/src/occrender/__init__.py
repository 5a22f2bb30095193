"""Differentiable semantic-occupancy volume rendering with desk-scale training tools."""

__version__ = "0.1.0"
