"""Federated learning with differential parameter dropout: a deterministic desk-scale simulator."""

__version__ = "0.1.0"
