"""Crash-consistent, encrypted neural-network training on an emulated
persistent-memory heap."""

__version__ = "0.1.0"
