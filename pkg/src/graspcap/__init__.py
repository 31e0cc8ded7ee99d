"""Markerless grasp capture with articulated 3D Gaussians.

Builds an articulable Gaussian hand model driven by a skeleton, composes
it with a static Gaussian object, renders the scene with a software
splatting rasterizer, and computes hand-object contact maps with
quantitative evaluation.
"""

__version__ = "0.1.0"
