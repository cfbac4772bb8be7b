"""Sphere clouds built from RGB-D frames, and sparse depth sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .errors import EmptyCloud, InvalidFraction, ShapeError
from .geometry import Camera, camera_to_world, unproject_pixel

R_MIN = 1e-4
R_MAX = 0.05


@dataclass(frozen=True, eq=False)
class RGBDFrame:
    """An RGB image with (possibly sparse) metric depth.

    ``depth == 0`` marks missing samples; ``valid_mask`` is derived from it
    when not given. ``iuv`` stores the part index in channel 0 (0 is
    background) and U, V in [0, 1] in channels 1 and 2.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid_mask: Optional[np.ndarray] = None
    iuv: Optional[np.ndarray] = None
    fg_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if rgb.ndim != 3 or depth.shape != rgb.shape[:2]:
            raise ShapeError(f"rgb {rgb.shape} and depth {depth.shape} do not match")
        valid = depth > 0
        if self.valid_mask is not None:
            given = np.asarray(self.valid_mask, dtype=bool)
            if given.shape != depth.shape or np.any(given != valid):
                raise ShapeError("valid_mask must equal depth > 0")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid_mask", valid)
        if self.iuv is not None:
            iuv = np.asarray(self.iuv, dtype=np.float64)
            if iuv.shape != depth.shape + (3,):
                raise ShapeError("iuv must be H x W x 3")
            object.__setattr__(self, "iuv", iuv)
        if self.fg_mask is not None:
            fg = np.asarray(self.fg_mask, dtype=bool)
            if fg.shape != depth.shape:
                raise ShapeError("fg_mask must be H x W")
            object.__setattr__(self, "fg_mask", fg)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def with_depth(self, depth: np.ndarray) -> "RGBDFrame":
        return replace(self, depth=depth, valid_mask=None)

    def sparsified(self, fraction: float, seed: int) -> "RGBDFrame":
        keep = sparse_sample(self.depth, fraction, seed)
        return self.with_depth(np.where(keep, self.depth, 0.0))


def radius_param_for(radius, r_min: float = R_MIN, r_max: float = R_MAX) -> np.ndarray:
    """Pre-activation value giving ``radius`` under the sigmoid bound."""
    return logit((np.asarray(radius, dtype=np.float64) - r_min) / (r_max - r_min))


@dataclass(frozen=True, eq=False)
class SphereCloud:
    """Spheres with world positions, feature vectors and bounded radii.

    Radii are ``r_min + (r_max - r_min) * sigmoid(radius_params)`` so any
    real ``radius_params`` gives a valid radius.
    """

    positions: np.ndarray
    features: np.ndarray
    radius_params: np.ndarray
    source_pixel: Optional[np.ndarray] = None
    r_min: float = R_MIN
    r_max: float = R_MAX

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        feat = np.ascontiguousarray(self.features, dtype=np.float64)
        if feat.ndim == 1:
            feat = feat[:, None]
        rp = np.ascontiguousarray(self.radius_params, dtype=np.float64).reshape(-1)
        n = pos.shape[0]
        if pos.shape != (n, 3) or feat.shape[0] != n or rp.shape != (n,):
            raise ShapeError("positions, features and radius_params disagree on N")
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "radius_params", rp)
        if self.source_pixel is not None:
            object.__setattr__(self, "source_pixel", np.asarray(self.source_pixel, dtype=np.int64))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def radii(self) -> np.ndarray:
        return self.r_min + (self.r_max - self.r_min) * expit(self.radius_params)

    def radius_jacobian(self) -> np.ndarray:
        """d radius / d radius_param, elementwise."""
        s = expit(self.radius_params)
        return (self.r_max - self.r_min) * s * (1.0 - s)

    def replace(self, **changes) -> "SphereCloud":
        return replace(self, **changes)

    def transformed(self, pose) -> "SphereCloud":
        return self.replace(positions=pose.apply(self.positions))

    def save(self, path) -> None:
        arrays = dict(positions=self.positions, features=self.features,
                      radius_params=self.radius_params,
                      bounds=np.array([self.r_min, self.r_max]))
        if self.source_pixel is not None:
            arrays["source_pixel"] = self.source_pixel
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "SphereCloud":
        with np.load(path) as data:
            sp = data["source_pixel"] if "source_pixel" in data else None
            r_min, r_max = data["bounds"]
            return cls(data["positions"], data["features"], data["radius_params"], sp,
                       float(r_min), float(r_max))


def cloud_from_rgbd(frame: RGBDFrame, cam: Camera, init_radius: float = 0.005,
                    features: Optional[np.ndarray] = None,
                    r_min: float = R_MIN, r_max: float = R_MAX) -> SphereCloud:
    """One sphere per valid depth pixel, placed at the unprojected pixel center.

    ``features`` may be an ``H x W x d`` image to use instead of ``frame.rgb``.
    """
    if (frame.height, frame.width) != (cam.height, cam.width):
        raise ShapeError("frame does not match camera resolution")
    if not (r_min < init_radius < r_max):
        raise ValueError(f"init_radius must lie in ({r_min}, {r_max})")
    feat_img = frame.rgb if features is None else np.asarray(features, dtype=np.float64)
    if feat_img.ndim == 2:
        feat_img = feat_img[..., None]
    if feat_img.shape[:2] != frame.depth.shape:
        raise ShapeError("feature image does not match frame")
    rows, cols = np.nonzero(frame.valid_mask)
    if rows.size == 0:
        raise EmptyCloud("frame has no valid depth pixels")
    z = frame.depth[rows, cols]
    pts_cam = unproject_pixel(cols + 0.5, rows + 0.5, z, cam)
    positions = camera_to_world(pts_cam, cam.pose)
    rp = np.full(rows.size, radius_param_for(init_radius, r_min, r_max))
    return SphereCloud(positions, feat_img[rows, cols], rp,
                       np.stack([cols, rows], axis=1), r_min, r_max)


def sparse_sample(depth: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Keep ``round(fraction * n_valid)`` valid depth pixels, uniformly at random.

    Uses a counter-based generator (Philox) keyed by ``seed``.
    """
    if not (0.0 < fraction <= 1.0):
        raise InvalidFraction(f"fraction must be in (0, 1], got {fraction}")
    depth = np.asarray(depth)
    valid = np.flatnonzero(depth > 0)
    if valid.size == 0:
        raise EmptyCloud("depth map has no valid pixels")
    k = int(round(fraction * valid.size))
    mask = np.zeros(depth.size, dtype=bool)
    if k == valid.size:
        mask[valid] = True
    else:
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        mask[valid[rng.choice(valid.size, size=k, replace=False)]] = True
    return mask.reshape(depth.shape)
