"""Soft-ROI brain captioning pipeline at desk scale."""

__version__ = "0.1.0"
