"""Synchronous image-label diffusion for lesion segmentation."""

__version__ = "0.1.0"
