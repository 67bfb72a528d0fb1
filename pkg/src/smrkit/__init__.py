"""Satisfied Machine Ratio toolkit."""

__version__ = "0.1.0"
