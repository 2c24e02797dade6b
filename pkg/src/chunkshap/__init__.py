"""Chunk-level Shapley valuation of tabular datasets."""

__version__ = "0.1.0"
