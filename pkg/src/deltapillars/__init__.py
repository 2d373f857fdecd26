"""Streaming pillar features with delta scatter convolutions."""

__version__ = "0.1.0"
