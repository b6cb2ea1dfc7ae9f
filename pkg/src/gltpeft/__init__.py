"""Gated Tucker adapters with multiplicative updates for 3D convolution kernels."""

__version__ = "0.1.0"
