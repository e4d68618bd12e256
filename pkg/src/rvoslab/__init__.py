"""Desk-scale referring video object segmentation laboratory."""

__version__ = "0.1.0"
