"""Relevant-variable search: exhaustive feature subsets scored by mutual information."""

__version__ = "0.1.0"
