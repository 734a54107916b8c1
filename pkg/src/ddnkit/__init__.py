"""Densely decoded segmentation networks with adaptive deep supervision."""

__version__ = "0.1.0"
