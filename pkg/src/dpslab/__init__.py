"""Desk-scale laboratory for guided diffusion sampling over exact-score priors."""

__version__ = "0.1.0"
