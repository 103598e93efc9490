"""Hierarchical pooled spectral GNNs over coarsened interaction graphs."""

__version__ = "0.1.0"
