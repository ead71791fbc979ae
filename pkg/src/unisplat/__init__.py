"""Streaming reconstruction of dynamic multi-camera scenes as 3D Gaussians
on a sparse latent voxel scaffold, with a differentiable software splatter."""

__version__ = "0.1.0"
