"""Pseudo-caption generation, vision-language pre-training and text-to-image person retrieval."""

__version__ = "0.1.0"
