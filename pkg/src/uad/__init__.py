"""Unsupervised uterine anomaly detection with a residual VAE."""

__version__ = "0.1.0"
