"""Unsupervised detection and tracking with a time-varying Polya-urn mixture."""

__version__ = "0.1.0"
