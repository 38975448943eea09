"""Identity/pose/expression disentangling toolkit on a synthetic factor dataset."""

__version__ = "0.1.0"
