"""Diffusion-based category-level pose estimation on synthetic observations."""
__version__ = "0.1.0"
