"""Desk-scale end-to-end speech event extraction."""

__version__ = "0.1.0"
