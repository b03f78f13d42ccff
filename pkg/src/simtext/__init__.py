"""Similarity-based text recognition with human-in-the-loop labeling."""

__version__ = "0.1.0"
