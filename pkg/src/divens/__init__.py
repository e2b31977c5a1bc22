"""Diversity-regularized parameter-sharing ensembles."""

__version__ = "0.1.0"
