"""Incremental mining of closed Horn rules over triple knowledge bases."""
__version__ = "0.1.0"
