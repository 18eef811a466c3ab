"""Transformer hidden-state exporter for the W2CE interchange format."""

__version__ = "0.1.0"
