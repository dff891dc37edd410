"""Desk-scale differentiable architecture search for spatio-temporal networks."""

__version__ = "0.1.0"
