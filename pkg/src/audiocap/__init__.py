"""Desk-scale contrastive audio captioning toolkit."""

__version__ = "0.1.0"
