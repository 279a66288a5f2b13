"""Unsupervised speckle reduction by content/noise disentanglement."""

__version__ = "0.1.0"
