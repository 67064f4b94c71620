"""Intensity-aware loss and global convolution-attention for video expression recognition."""

__version__ = "0.1.0"
