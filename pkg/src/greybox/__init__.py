"""Adaptive deep grey-box modeling."""

__version__ = "0.1.0"
