"""Optimal experimental design for controlled ODE systems."""

__version__ = "0.1.0"
