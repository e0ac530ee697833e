"""Triplet-block masked-denoising training and block-parallel decoding for a
recurrent byte-level language model."""

__version__ = "0.1.0"
