"""Attention-vs-attribution explanation agreement toolkit."""

__version__ = "0.1.0"
