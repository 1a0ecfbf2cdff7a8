"""Restricted plan runtime; see runner.py for the wire protocol."""

__version__ = "0.1.0"
