"""Sparse mixture-of-experts point-cloud segmentation at desk scale."""

__version__ = "0.1.0"
