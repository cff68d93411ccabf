"""Deconfounded gradient aggregation and per-group plugin networks for
long-tailed sequential recommendation."""

__version__ = "0.1.0"
