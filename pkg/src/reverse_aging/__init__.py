"""Unpaired reverse-aging translation and residual-based concrete damage detection."""

__version__ = "0.1.0"
