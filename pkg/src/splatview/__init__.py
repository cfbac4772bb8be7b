"""Sphere-based differentiable rendering for sparse RGB-D view synthesis."""

from .cloud import RGBDFrame, SphereCloud, cloud_from_rgbd, sparse_sample
from .geometry import Camera, RigidTransform
from .raster import RenderOutput, RenderSettings, render, render_backward, zbuffer_render

__version__ = "0.1.0"
