"""Deviation-proof spectrum sharing under imperfect interference monitoring."""

__version__ = "0.1.0"
