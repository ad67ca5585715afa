"""Timbre-guided singing quality evaluation at desk scale."""

__version__ = "0.1.0"
