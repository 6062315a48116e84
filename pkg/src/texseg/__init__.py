"""Unsupervised texture defect segmentation with SSIM and per-pixel autoencoders."""

__version__ = "0.1.0"
