"""Desk-scale Bitcoin protocol simulator with attack and privacy analyses."""

__version__ = "0.1.0"
