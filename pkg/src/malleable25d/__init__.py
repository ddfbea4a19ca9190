"""Malleable 2.5D convolution: depth-conditioned convolution kernels with learnable
soft receptive fields along the depth axis, plus baselines, oracles and a toy harness."""

__version__ = "0.1.0"
