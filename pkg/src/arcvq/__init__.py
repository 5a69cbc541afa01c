"""Spherical vector quantization with ball-bounded codebooks and ArcLoss."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
