"""Transported stochastic direct and indirect effect estimation."""

__version__ = "0.1.0"
