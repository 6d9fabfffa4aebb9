"""Fractional Lamé systems on a periodic grid: forward solvers, Dirichlet-to-Neumann
maps, Runge approximation and the inversion experiments built on them."""

__version__ = "0.1.0"
