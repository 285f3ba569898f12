"""Composed-retrieval fusion adapter: numerics, training, and evaluation."""

__version__ = "0.1.0"
