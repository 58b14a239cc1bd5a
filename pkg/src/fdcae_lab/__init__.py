"""Desk-scale f-DcAE acoustic-modeling laboratory."""

__version__ = "0.1.0"
