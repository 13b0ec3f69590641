"""Learnable attention refinement of coarse patch-to-class affinity maps."""

__version__ = "0.1.0"
