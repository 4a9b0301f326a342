"""Semantic segmentation trained from per-image class proportions."""

__version__ = "0.1.0"
