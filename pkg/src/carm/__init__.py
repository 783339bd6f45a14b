"""Conflict-aware resource management on a simulated cluster."""

__version__ = "0.1.0"
