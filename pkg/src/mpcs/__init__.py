"""Magnification-prior contrastive pre-training and evaluation for histopathology images."""

__version__ = "0.1.0"
