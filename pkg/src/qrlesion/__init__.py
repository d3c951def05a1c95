"""Quantile-regression uncertainty for unsupervised lesion detection and
multi-rater segmentation, built on a small numpy neural-network engine."""

__version__ = "0.1.0"
