"""Finite element experiments for the stochastic Landau-Lifshitz-Bloch equation."""

__version__ = "0.1.0"
