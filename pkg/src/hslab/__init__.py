"""Desk-scale laboratory for hard-sphere kinetic theory."""

__version__ = "0.1.0"
