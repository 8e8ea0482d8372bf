"""Empirical performance modeling of dense linear algebra kernels."""

__version__ = "0.1.0"
