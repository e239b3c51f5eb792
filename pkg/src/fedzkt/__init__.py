"""Federated learning with zero-shot knowledge transfer across heterogeneous device models."""

__version__ = "0.1.0"
