"""Bijective maximum-likelihood domain adaptation on a desk-scale benchmark."""

__version__ = "0.1.0"
