"""Endorsement-based offline mobile payments over MANET/DTN."""

__version__ = "0.1.0"
