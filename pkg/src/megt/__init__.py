"""Dual-resolution graph-transformer for multiple-instance bag classification."""

__version__ = "0.1.0"
