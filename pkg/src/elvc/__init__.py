"""Desk-scale electrolaryngeal-to-normal speech conversion pipeline."""

__version__ = "0.1.0"
