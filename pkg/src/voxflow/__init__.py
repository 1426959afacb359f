"""Mask-guided editing of voxel latents with flow inversion and cached attention."""

__version__ = "0.1.0"
