"""Panoramic video object segmentation with PSC attention."""

__version__ = "0.1.0"
