"""Desk-scale spectrum-to-signal post-training lab."""

__version__ = "0.1.0"
