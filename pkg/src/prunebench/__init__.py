"""Desk-scale benchmark for unstructured neural-network pruning."""

__version__ = "0.1.0"
