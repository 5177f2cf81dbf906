"""Semantic feature discrimination for perceptual super-resolution and opinion-unaware IQA."""

__version__ = "0.1.0"
