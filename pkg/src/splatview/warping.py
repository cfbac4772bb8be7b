"""Image warping: forward point splatting, inverse (gather) warping,
IUV texture transfer, plus compositing and fusion of the results."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import RGBDFrame
from .completion import pull_push
from .errors import EmptyOverlap, RangeError, ShapeError
from .geometry import Camera, camera_to_world, unproject_pixel

ATLAS_SIZE = 256
N_PARTS = 24
_SNAP = 1e-9


@dataclass
class WarpedImage:
    image: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        valid = np.asarray(self.validity, dtype=bool)
        if valid.shape != img.shape[:2]:
            raise ShapeError("validity must match the image's first two axes")
        mask = valid[..., None] if img.ndim == 3 else valid
        self.image = np.where(mask, img, 0.0)
        self.validity = valid

    @property
    def coverage(self) -> float:
        return float(self.validity.mean())


def _as_hwc(img) -> tuple:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[..., None], True
    return a, False


def _relative(src: Camera, dst: Camera, pts_src: np.ndarray) -> np.ndarray:
    return dst.pose.apply(camera_to_world(pts_src, src.pose))


def forward_depth_warp(frame: RGBDFrame, src: Camera, dst: Camera) -> WarpedImage:
    """Scatter every valid source pixel, as a single point, into ``dst``.

    Each point lands on the pixel containing its projection. Collisions keep
    the smaller depth, then the lower source index.
    """
    if (frame.height, frame.width) != (src.height, src.width):
        raise ShapeError("frame does not match the source camera")
    rgb, squeeze = _as_hwc(frame.rgb)
    out = np.zeros((dst.height, dst.width, rgb.shape[2]))
    valid = np.zeros((dst.height, dst.width), dtype=bool)
    rows, cols = np.nonzero(frame.valid_mask)
    if rows.size:
        pts = unproject_pixel(cols + 0.5, rows + 0.5, frame.depth[rows, cols], src)
        p = _relative(src, dst, pts)
        z = p[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = np.floor(dst.fx * p[:, 0] / zs + dst.cx)
        v = np.floor(dst.fy * p[:, 1] / zs + dst.cy)
        ok = front & (u >= 0) & (u < dst.width) & (v >= 0) & (v < dst.height)
        src_idx = (rows * frame.width + cols)[ok]
        pix = (v[ok] * dst.width + u[ok]).astype(np.int64)
        zk = z[ok]
        # quantize depth so that near-ties (< 1e-9 m) fall back to the index
        order = np.lexsort((src_idx, np.floor(zk / _SNAP), pix))
        pix_s = pix[order]
        first = np.ones(pix_s.size, dtype=bool)
        first[1:] = pix_s[1:] != pix_s[:-1]
        winners = order[first]
        flat = out.reshape(-1, rgb.shape[2])
        flat[pix[winners]] = rgb[rows[ok][winners], cols[ok][winners]]
        valid.ravel()[pix[winners]] = True
    return WarpedImage(out[..., 0] if squeeze else out, valid)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``image`` at continuous pixel coordinates (centers at +0.5).

    Returns ``(values, inside)``; positions whose 2x2 footprint leaves the
    image are invalid and yield zeros. Positions within 1e-9 px of a pixel
    center snap to it, so resampling on the grid is exact.
    """
    img, squeeze = _as_hwc(image)
    h, w = img.shape[:2]
    gx = x - 0.5
    gy = y - 0.5
    gx = np.where(np.abs(gx - np.rint(gx)) < _SNAP, np.rint(gx), gx)
    gy = np.where(np.abs(gy - np.rint(gy)) < _SNAP, np.rint(gy), gy)
    inside = np.isfinite(gx) & np.isfinite(gy) & (gx >= 0) & (gx <= w - 1) & (gy >= 0) & (gy <= h - 1)
    gx = np.where(inside, gx, 0.0)
    gy = np.where(inside, gy, 0.0)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    val = ((img[y0, x0] * (1 - fx) + img[y0, x1] * fx) * (1 - fy)
           + (img[y1, x0] * (1 - fx) + img[y1, x1] * fx) * fy)
    val = np.where(inside[..., None], val, 0.0)
    return (val[..., 0] if squeeze else val), inside


def inverse_warp_W(src_image: np.ndarray, dst_depth: np.ndarray, dst: Camera,
                   src: Camera) -> WarpedImage:
    """Gather ``src_image`` into ``dst`` using the destination depth map."""
    depth = np.asarray(dst_depth, dtype=np.float64)
    if depth.shape != (dst.height, dst.width):
        raise ShapeError("depth map does not match the destination camera")
    img, squeeze = _as_hwc(src_image)
    if img.shape[:2] != (src.height, src.width):
        raise ShapeError("source image does not match the source camera")
    has = depth > 0
    uu, vv = np.meshgrid(np.arange(dst.width) + 0.5, np.arange(dst.height) + 0.5)
    pts = unproject_pixel(uu, vv, np.where(has, depth, 1.0), dst)
    p = _relative(dst, src, pts.reshape(-1, 3)).reshape(pts.shape)
    z = p[..., 2]
    front = has & (z > 0)
    zs = np.where(front, z, 1.0)
    x = src.fx * p[..., 0] / zs + src.cx
    y = src.fy * p[..., 1] / zs + src.cy
    val, inside = bilinear_sample(img, np.where(front, x, -1.0), np.where(front, y, -1.0))
    valid = inside & front
    return WarpedImage(val[..., 0] if squeeze else val, valid)


def consistency_residual(I_L: np.ndarray, I_R: np.ndarray, depth_L: np.ndarray,
                         cam_L: Camera, cam_R: Camera):
    """``|I_L - W(I_R)|`` with its validity mask.

    Raises ``EmptyOverlap`` when no left pixel has a valid sample in the
    right view.
    """
    a = np.asarray(I_L, dtype=np.float64)
    if a.shape != np.shape(I_R):
        raise ShapeError("stereo images differ in shape")
    warped = inverse_warp_W(I_R, depth_L, cam_L, cam_R)
    if not warped.validity.any():
        raise EmptyOverlap("no overlap between the two views")
    mask = warped.validity[..., None] if a.ndim == 3 else warped.validity
    return np.where(mask, np.abs(a - warped.image), 0.0), warped.validity


def consistency_value(I_L, I_R, depth_L, cam_L, cam_R) -> float:
    """Mean absolute residual over valid pixels (and channels)."""
    res, valid = consistency_residual(I_L, I_R, depth_L, cam_L, cam_R)
    per_px = res.mean(axis=2) if res.ndim == 3 else res
    return float(per_px[valid].mean())


def build_atlas(src_image: np.ndarray, src_iuv: np.ndarray, size: int = ATLAS_SIZE):
    """Per-part texture atlases: ``(atlases, present)``.

    ``atlases`` has shape ``(25, size, size, c)``; slot 0 is unused. Each
    source pixel goes to its nearest (U, V) bin, bins average their pixels
    and empty bins are filled by pull-push.
    """
    img, _ = _as_hwc(src_image)
    iuv = np.asarray(src_iuv, dtype=np.float64)
    part = np.rint(iuv[..., 0]).astype(np.int64)
    c = img.shape[2]
    atlases = np.zeros((N_PARTS + 1, size, size, c))
    present = np.zeros(N_PARTS + 1, dtype=bool)
    for p in np.unique(part):
        if p <= 0 or p > N_PARTS:
            continue
        sel = part == p
        bu = np.clip(np.floor(iuv[..., 1][sel] * size), 0, size - 1).astype(np.int64)
        bv = np.clip(np.floor(iuv[..., 2][sel] * size), 0, size - 1).astype(np.int64)
        flat = bv * size + bu
        cnt = np.bincount(flat, minlength=size * size).astype(np.float64)
        acc = np.stack([np.bincount(flat, weights=img[..., k][sel], minlength=size * size)
                        for k in range(c)], axis=1)
        mean = acc / np.maximum(cnt, 1.0)[:, None]
        atlases[p] = pull_push(mean.reshape(size, size, c), (cnt > 0).reshape(size, size))
        present[p] = True
    return atlases, present


def sample_atlas(atlases: np.ndarray, present: np.ndarray, iuv: np.ndarray) -> WarpedImage:
    size = atlases.shape[1]
    iuv = np.asarray(iuv, dtype=np.float64)
    part = np.rint(iuv[..., 0]).astype(np.int64)
    ok = (part > 0) & (part <= N_PARTS)
    ok &= present[np.clip(part, 0, N_PARTS)]
    # bin centers sit at (k + 0.5) / size; U is periodic, V is clamped
    x = iuv[..., 1] * size - 0.5
    y = np.clip(iuv[..., 2] * size - 0.5, 0, size - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), size - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 %= size
    x1 = (x0 + 1) % size
    p = np.where(ok, part, 0)
    val = ((atlases[p, y0, x0] * (1 - fx) + atlases[p, y0, x1] * fx) * (1 - fy)
           + (atlases[p, y0 + 1, x0] * (1 - fx) + atlases[p, y0 + 1, x1] * fx) * fy)
    return WarpedImage(val, ok)


def iuv_warp(src_image: np.ndarray, src_iuv: np.ndarray, dst_iuv: np.ndarray,
             atlas_size: int = ATLAS_SIZE) -> WarpedImage:
    """Transfer appearance through dense surface correspondences."""
    if np.shape(src_iuv)[:2] != np.shape(src_image)[:2]:
        raise ShapeError("source IUV does not match the source image")
    atlases, present = build_atlas(src_image, src_iuv, atlas_size)
    out = sample_atlas(atlases, present, dst_iuv)
    if np.ndim(src_image) == 2:
        return WarpedImage(out.image[..., 0], out.validity)
    return out


def _check_unit(name, a, tol=1e-9):
    if np.any(a < -tol) or np.any(a > 1 + tol) or not np.all(np.isfinite(a)):
        raise RangeError(f"{name} must lie in [0, 1]")


def composite(I_raw: np.ndarray, I_m: np.ndarray, I_c: np.ndarray) -> np.ndarray:
    """``I_raw * I_m * I_c`` with masks broadcast over channels."""
    raw = np.asarray(I_raw, dtype=np.float64)
    m = np.asarray(I_m, dtype=np.float64)
    c = np.asarray(I_c, dtype=np.float64)
    for name, a in (("image", raw), ("mask", m), ("confidence", c)):
        _check_unit(name, a)
    if m.shape != raw.shape[:2] or c.shape != raw.shape[:2]:
        raise ShapeError("mask and confidence must be H x W")
    if raw.ndim == 3:
        m, c = m[..., None], c[..., None]
    return raw * m * c


def fuse(I_p: np.ndarray, I_c: np.ndarray, I_w: WarpedImage) -> np.ndarray:
    """``I_p + (1 - I_c) * I_w`` at valid warped pixels, clamped to [0, 1]."""
    p = np.asarray(I_p, dtype=np.float64)
    c = np.asarray(I_c, dtype=np.float64)
    if c.shape != p.shape[:2] or I_w.image.shape != p.shape:
        raise ShapeError("fuse inputs disagree in shape")
    _check_unit("confidence", c)
    gate = (1.0 - c) * I_w.validity
    if p.ndim == 3:
        gate = gate[..., None]
    return np.clip(p + gate * I_w.image, 0.0, 1.0)
