"""Numerical checks of matrix Li-Yau-Hamilton estimates on model Kähler and Riemannian manifolds."""

__version__ = "0.1.0"
