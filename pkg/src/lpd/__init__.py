"""Partially de-correlated multi-space cross-modal retrieval."""

__version__ = "0.1.0"
