"""Radon-domain line detection via iterative and deep-unfolded ADMM."""

__version__ = "0.1.0"
