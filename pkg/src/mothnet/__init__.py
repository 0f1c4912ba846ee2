"""Insect-olfactory-network feature generation and few-shot experiments."""

__version__ = "0.1.0"
