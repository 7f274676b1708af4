"""Fictitious play for finite mean field games."""

__version__ = "0.1.0"
