"""Global zero-sum low-rank compression in activation-whitened coordinates."""

__version__ = "0.1.0"
