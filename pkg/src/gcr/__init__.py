"""Geometric consistency regularisation for relative pose: correspondences, weighted
RANSAC, losses, metrics and a desk-scale toy trainer."""

__version__ = "0.1.0"
