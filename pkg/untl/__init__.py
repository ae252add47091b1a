"""Unsupervised non-transferable learning for text classification, at desk scale."""

__version__ = "0.1.0"
