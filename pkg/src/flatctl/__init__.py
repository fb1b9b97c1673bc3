"""Flatness-based quasi-static feedback synthesis and verification."""

__version__ = "0.1.0"
