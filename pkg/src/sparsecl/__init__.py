"""Sparse continual learning: importance-ranked top-k gradient masking and baselines."""

__version__ = "0.1.0"
