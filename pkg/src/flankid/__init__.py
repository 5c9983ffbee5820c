"""Detect-then-identify pipeline for individually patterned animals."""

__version__ = "0.1.0"
