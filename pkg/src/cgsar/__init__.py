"""Building segmentation in SAR images with GIS-conditioned normalization, at desk scale."""

__version__ = "0.1.0"
