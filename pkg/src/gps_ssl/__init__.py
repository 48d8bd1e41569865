"""Guided positive sampling for self-supervised learning, at desk scale."""

__version__ = "0.1.0"
