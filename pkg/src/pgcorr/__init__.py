"""Correlated multinomial priors with Polya-Gamma variational inference."""
__version__ = "0.1.0"
