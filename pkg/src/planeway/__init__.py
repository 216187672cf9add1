"""Traversable-plane mapping and cross-plane trajectory planning."""

__version__ = "0.1.0"
