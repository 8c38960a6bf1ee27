"""Capsule networks with grouped dynamic routing on a small autodiff core."""

__version__ = "0.1.0"
