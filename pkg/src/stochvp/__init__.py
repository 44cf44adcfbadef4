"""Stochastic video prediction with a structure/motion decomposition."""
__version__ = "0.1.0"
