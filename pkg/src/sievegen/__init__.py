"""Sieve maximum likelihood for deep generative models with data perturbation."""

__version__ = "0.1.0"
