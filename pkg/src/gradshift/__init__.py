"""Gradual self-training across constructed intermediate domains."""

__version__ = "0.1.0"
