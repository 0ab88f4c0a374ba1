"""Multinode VAE speech/music separation with RPCA enhancement."""

__version__ = "0.1.0"
