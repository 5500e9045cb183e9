"""Unrolled proximal gradient networks for sparse recovery, trained end to end."""

__version__ = "0.1.0"
