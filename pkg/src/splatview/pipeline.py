"""End-to-end novel view synthesis from a single sparse RGB-D frame.

render -> unpremultiply -> composite with mask and confidence -> optional
IUV texture transfer and fusion -> pull-push completion inside the
foreground hull.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .cloud import RGBDFrame, SphereCloud, cloud_from_rgbd
from .completion import pull_push
from .geometry import Camera
from .optim import FitConfig, FitTarget, fit
from .raster import RenderOutput, RenderSettings, render
from .warping import WarpedImage, composite, fuse, iuv_warp

log = logging.getLogger(__name__)

HULL_RADIUS = 3


@dataclass
class SynthesisResult:
    image: np.ndarray
    raw: np.ndarray  # render features before fusion and completion
    alpha: np.ndarray
    depth: np.ndarray
    hull: np.ndarray
    warped: Optional[WarpedImage]
    render: RenderOutput


def unpremultiply(features: np.ndarray, alpha: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Foreground color from a blend ``alpha * f + (1 - alpha) * background``."""
    a = alpha[..., None]
    fg = (features - (1.0 - a) * background) / np.where(a > 0, a, 1.0)
    return np.where(a > 0, np.clip(fg, 0.0, 1.0), 0.0)


def foreground_hull(alpha: np.ndarray, radius: int = HULL_RADIUS,
                    dst_iuv: Optional[np.ndarray] = None) -> np.ndarray:
    """Silhouette to complete: dense-correspondence foreground when known,
    else the morphological closing of the covered region."""
    if dst_iuv is not None:
        return np.rint(dst_iuv[..., 0]) > 0
    covered = alpha >= 0.5
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = xx * xx + yy * yy <= radius * radius
    padded = np.pad(covered, radius + 1)
    closed = ndimage.binary_closing(padded, structure=disk)[radius + 1:-radius - 1, radius + 1:-radius - 1]
    return closed | covered


def synthesize(cloud: SphereCloud, cam: Camera, background, settings: RenderSettings = RenderSettings(),
               complete: bool = True, occlusion_free: Optional[tuple] = None,
               dst_iuv: Optional[np.ndarray] = None, threads: Optional[int] = None) -> SynthesisResult:
    """Novel view of ``cloud`` from ``cam``.

    ``occlusion_free`` is an optional ``(rgb, iuv)`` pair from an
    unobstructed view; together with ``dst_iuv`` it enables texture
    transfer into pixels the render leaves uncertain.
    """
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (cloud.dim,)).copy()
    out = render(cloud, cam, settings.replace(background=tuple(bg)), threads=threads)
    alpha = np.clip(out.alpha, 0.0, 1.0)
    hull = foreground_hull(alpha, dst_iuv=dst_iuv)
    fg = unpremultiply(out.features, alpha, bg)
    I_c = np.where(hull, alpha, 0.0)
    I_p = composite(fg, hull.astype(np.float64), I_c)
    weight = I_c.copy()
    warped = None
    if occlusion_free is not None and dst_iuv is not None:
        src_rgb, src_iuv = occlusion_free
        warped = iuv_warp(src_rgb, src_iuv, dst_iuv)
        warped = WarpedImage(warped.image, warped.validity & hull)
        I_p = fuse(I_p, I_c, warped)
        weight = I_c + (1.0 - I_c) * warped.validity
    elif occlusion_free is not None:
        log.warning("no target IUV map: skipping texture transfer")

    color = I_p / np.where(weight > 0, weight, 1.0)[..., None]
    image = np.where(hull[..., None], color, bg)
    if complete:
        w = np.where(hull, weight, 1.0)
        if np.any(w > 0):
            image = pull_push(image, w)
    else:
        image = np.where(hull[..., None], I_p + (1.0 - weight[..., None]) * bg, bg)
    return SynthesisResult(np.clip(image, 0.0, 1.0), out.features, alpha, out.depth, hull,
                           warped, out)


def fit_radii(cloud: SphereCloud, views, steps: int = 200, learning_rate: float = 0.05,
              threads: Optional[int] = None, **kw):
    """Fit radii against ``views``, a list of ``(Camera, RGBDFrame)`` with
    RGB and foreground masks."""
    targets = [FitTarget(cam, fr.rgb, fr.fg_mask.astype(np.float64)
                         if fr.fg_mask is not None else (fr.depth > 0).astype(np.float64))
               for cam, fr in views]
    cfg = FitConfig(steps=steps, learning_rate=learning_rate, targets=targets, threads=threads, **kw)
    return fit(cloud, cfg)


def sparse_cloud(frame: RGBDFrame, cam: Camera, fraction: float, seed: int,
                 init_radius: float = 0.005) -> SphereCloud:
    return cloud_from_rgbd(frame.sparsified(fraction, seed) if fraction < 1.0 else frame, cam,
                           init_radius)
