"""High-dimensional batch Bayesian optimization with a learned linear embedding."""

__version__ = "0.1.0"
