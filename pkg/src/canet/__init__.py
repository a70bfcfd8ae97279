"""Skeleton extraction from binary shape images.

A small, self-contained stack: a reverse-mode autodiff engine over NumPy
arrays, an encoder-decoder network with context attention blocks, classic
binary-image operations (distance transform, hole filling, thinning), and
a training/evaluation command line.
"""

from canet._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
