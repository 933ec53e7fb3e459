"""Exact and numerical tools for Bergman kernel expansions of renormalized Bochner-Laplacians."""

__version__ = "0.1.0"
