"""Radar-to-LiDAR point cloud super-resolution via a mean-reverting SDE
diffusion model over bird's-eye-view images."""

__version__ = "0.1.0"
