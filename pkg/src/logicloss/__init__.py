"""Compile logical consistency rules over classifier predictions into losses."""

__version__ = "0.1.0"
