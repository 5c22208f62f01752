"""Desk-scale multi-singer vocal generation sandbox."""

__version__ = "0.1.0"
