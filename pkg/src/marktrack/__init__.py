"""Mark-driven batch multi-object tracker with guided error correction."""

__version__ = "0.1.0"
