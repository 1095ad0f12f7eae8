"""Covariate-shift audits for inspected-versus-population customer data."""

__version__ = "0.1.0"
