"""Probabilistic multi-fidelity aerodynamic databases and certification analysis."""

__version__ = "0.1.0"
