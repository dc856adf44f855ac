"""Adaptive ISO and white-balance prediction from RAW Bayer captures."""

__version__ = "0.1.0"
