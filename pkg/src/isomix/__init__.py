"""Bayesian stable isotope mixing models on ilr coordinates."""
__version__ = "0.1.0"
