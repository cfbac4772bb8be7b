"""Differentiable sphere rasterizer.

Every sphere is projected to a screen disc of radius ``rho = r * fx / z``.
A pixel ``q`` is covered by sphere ``i`` when ``|q - u_i| <= rho_i + tail / s``
(``tail = 0`` gives the hard disc). Among covering spheres, only the
``max_per_pixel`` nearest take part, each with weight::

    alpha_i = sigmoid(s * (rho_i - |q - u_i|))
    omega_i = alpha_i * exp(d_i / gamma),   d_i = (z_far - z_i) / (z_far - z_near)

and the background carries weight ``eps + 1``. Features are the normalized
blend; ``alpha`` is the foreground share of the total weight. Spheres
outside ``[z_near, z_far]`` are dropped.

Two interchangeable backends implement the pixel loops: a compiled
OpenMP kernel (``_kernels``) and a NumPy fallback (``_numpy``). The
compiled one is used when importable unless ``SPLATVIEW_BACKEND=python``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..cloud import SphereCloud
from ..errors import EmptyCloud, ShapeError
from ..geometry import Camera
from . import _numpy

log = logging.getLogger(__name__)

try:
    from . import _kernels
except ImportError:  # pragma: no cover - exercised only without a build
    _kernels = None

BACKENDS = {"python": _numpy}
if _kernels is not None:
    BACKENDS["compiled"] = _kernels


def _default_backend() -> str:
    want = os.environ.get("SPLATVIEW_BACKEND", "auto")
    if want == "auto":
        return "compiled" if "compiled" in BACKENDS else "python"
    if want not in BACKENDS:
        log.warning("backend %r unavailable, using python", want)
        return "python"
    return want


DEFAULT_BACKEND = _default_backend()


def default_threads() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RenderSettings:
    gamma: float = 0.05
    sharpness: float = 1.0
    background: Optional[tuple] = None
    eps: float = 1e-8
    tail: float = 0.0
    tile_size: int = 16
    max_per_pixel: int = 32

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if self.eps < 0 or self.tail < 0:
            raise ValueError("eps and tail must be non-negative")
        ts = self.tile_size
        if ts < 1 or ts & (ts - 1):
            raise ValueError("tile_size must be a positive power of two")
        if self.max_per_pixel < 1:
            raise ValueError("max_per_pixel must be >= 1")
        if self.background is not None:
            object.__setattr__(self, "background", tuple(float(x) for x in self.background))

    def background_vector(self, dim: int) -> np.ndarray:
        if self.background is None:
            return np.zeros(dim)
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.size == 1:
            return np.full(dim, bg[0])
        if bg.size != dim:
            raise ShapeError(f"background has {bg.size} channels, features have {dim}")
        return bg

    def replace(self, **kw) -> "RenderSettings":
        from dataclasses import replace
        return replace(self, **kw)


@dataclass
class RenderOutput:
    """Rendered image plus per-pixel diagnostics.

    ``winner`` is the index of the sphere with the largest blend weight
    (-1 where the background outweighs every sphere). ``margin`` is the gap
    between the two largest normalized weights, background included.
    ``count`` and ``key`` identify the participating set per pixel; two
    renders with equal ``key`` maps blended the same spheres everywhere.
    """

    features: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    winner: np.ndarray
    margin: np.ndarray = field(repr=False)
    count: np.ndarray = field(repr=False)
    key: np.ndarray = field(repr=False)


@dataclass
class CloudGrads:
    d_positions: np.ndarray
    d_radius_params: np.ndarray
    d_features: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_positions.ravel(), self.d_radius_params.ravel(),
                               self.d_features.ravel()])


@dataclass
class _Projected:
    order: np.ndarray  # original indices of kept spheres, front to back
    cam_pts: np.ndarray
    u: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    cover: np.ndarray
    d: np.ndarray
    z: np.ndarray
    radii: np.ndarray
    feat: np.ndarray


def _project(cloud: SphereCloud, cam: Camera, settings: RenderSettings) -> _Projected:
    pc = cam.pose.apply(cloud.positions)
    z_all = pc[:, 2]
    keep = np.flatnonzero((z_all >= cam.z_near) & (z_all <= cam.z_far))
    order = keep[np.argsort(z_all[keep], kind="stable")]
    pc = pc[order]
    z = pc[:, 2].copy()
    radii = cloud.radii[order]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    rho = radii * cam.fx / z
    cover = rho + settings.tail / settings.sharpness
    d = (cam.z_far - z) / (cam.z_far - cam.z_near)
    feat = np.ascontiguousarray(cloud.features[order])
    return _Projected(order, pc, u, v, rho, cover, d, z, radii, feat)


def _kernel_args(pr: _Projected, cam: Camera, settings: RenderSettings, dim: int):
    return (np.ascontiguousarray(pr.u), np.ascontiguousarray(pr.v), np.ascontiguousarray(pr.rho),
            np.ascontiguousarray(pr.cover), np.ascontiguousarray(pr.d), pr.z, pr.feat,
            pr.order.astype(np.longlong), settings.background_vector(dim),
            cam.width, cam.height, float(settings.gamma), float(settings.sharpness),
            float(settings.eps), int(settings.max_per_pixel), int(settings.tile_size))


def _pick(backend: Optional[str]):
    name = backend or DEFAULT_BACKEND
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    return BACKENDS[name]


def _empty_output(cam: Camera, bg: np.ndarray) -> RenderOutput:
    h, w = cam.height, cam.width
    return RenderOutput(np.broadcast_to(bg, (h, w, bg.size)).copy(), np.zeros((h, w)),
                        np.zeros((h, w)), np.full((h, w), -1, dtype=np.int64),
                        np.ones((h, w)), np.zeros((h, w), dtype=np.intc),
                        np.zeros((h, w), dtype=np.uint64))


def render(cloud: SphereCloud, cam: Camera, settings: RenderSettings = RenderSettings(),
           threads: Optional[int] = None, backend: Optional[str] = None) -> RenderOutput:
    """Soft-blend the cloud into ``cam``."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    bg = settings.background_vector(cloud.dim)
    pr = _project(cloud, cam, settings)
    if pr.order.size == 0:
        return _empty_output(cam, bg)
    mod = _pick(backend)
    feat, alpha, depth, winner, margin, count, key = mod.forward(
        *_kernel_args(pr, cam, settings, cloud.dim), threads or default_threads())
    winner = np.where(winner >= 0, pr.order[np.maximum(winner, 0)], -1).astype(np.int64)
    return RenderOutput(feat, alpha, depth, winner, margin, count, key)


def render_backward(cloud: SphereCloud, cam: Camera, settings: RenderSettings,
                    grad_features: np.ndarray, grad_alpha: Optional[np.ndarray] = None,
                    threads: Optional[int] = None, backend: Optional[str] = None) -> CloudGrads:
    """Vector-Jacobian product of :func:`render` at ``cloud``.

    ``grad_features`` (H x W x d) and the optional ``grad_alpha`` (H x W) are
    the upstream gradients of a scalar loss with respect to the outputs.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    h, w, dim = cam.height, cam.width, cloud.dim
    g_feat = np.asarray(grad_features, dtype=np.float64)
    if g_feat.ndim == 2 and dim == 1:
        g_feat = g_feat[..., None]
    if g_feat.shape != (h, w, dim):
        raise ShapeError(f"upstream gradient {g_feat.shape} != render output {(h, w, dim)}")
    g_alpha = None
    if grad_alpha is not None:
        g_alpha = np.ascontiguousarray(grad_alpha, dtype=np.float64)
        if g_alpha.shape != (h, w):
            raise ShapeError(f"alpha gradient {g_alpha.shape} != {(h, w)}")
    n = len(cloud)
    grads = CloudGrads(np.zeros((n, 3)), np.zeros(n), np.zeros((n, dim)))
    pr = _project(cloud, cam, settings)
    if pr.order.size == 0:
        return grads
    nthreads = threads or default_threads()
    mod = _pick(backend)
    buf = mod.backward(*_kernel_args(pr, cam, settings, dim), nthreads,
                       np.ascontiguousarray(g_feat), g_alpha)
    part = buf[0].copy()
    for k in range(1, buf.shape[0]):
        part += buf[k]
    gu, gv, grho, gd, gfeat = part[:, 0], part[:, 1], part[:, 2], part[:, 3], part[:, 4:]

    x, y, z = pr.cam_pts[:, 0], pr.cam_pts[:, 1], pr.z
    fx, fy = cam.fx, cam.fy
    gx = gu * fx / z
    gy = gv * fy / z
    gz = (-gu * fx * x / z**2 - gv * fy * y / z**2 - grho * pr.radii * fx / z**2
          - gd / (cam.z_far - cam.z_near))
    g_cam = np.stack([gx, gy, gz], axis=1)
    grads.d_positions[pr.order] = g_cam @ cam.pose.rotation
    grads.d_radius_params[pr.order] = grho * fx / z * cloud.radius_jacobian()[pr.order]
    grads.d_features[pr.order] = gfeat
    return grads


def zbuffer_render(cloud: SphereCloud, cam: Camera, background=None) -> RenderOutput:
    """Hard z-buffer reference: nearest sphere whose disc covers each pixel.

    Non-differentiable; independent of the blending backends.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    settings = RenderSettings(background=background)
    bg = settings.background_vector(cloud.dim)
    h, w = cam.height, cam.width
    out = _empty_output(cam, bg)
    pr = _project(cloud, cam, settings)
    if pr.order.size == 0:
        return out
    best = np.full(h * w, np.inf)
    win = np.full(h * w, -1, dtype=np.int64)
    # front to back: a pixel keeps the first sphere that reaches it
    for k in range(pr.order.size):
        r = pr.rho[k]
        i0 = max(int(np.ceil(pr.u[k] - r - 0.5)), 0)
        i1 = min(int(np.floor(pr.u[k] + r - 0.5)), w - 1)
        j0 = max(int(np.ceil(pr.v[k] - r - 0.5)), 0)
        j1 = min(int(np.floor(pr.v[k] + r - 0.5)), h - 1)
        if i0 > i1 or j0 > j1:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
        hit = (ii + 0.5 - pr.u[k]) ** 2 + (jj + 0.5 - pr.v[k]) ** 2 <= r * r
        pix = (jj * w + ii)[hit]
        pix = pix[best[pix] == np.inf]
        best[pix] = pr.z[k]
        win[pix] = k
    covered = win >= 0
    out.winner.ravel()[covered] = pr.order[win[covered]]
    out.features.reshape(-1, cloud.dim)[covered] = pr.feat[win[covered]]
    out.alpha.ravel()[covered] = 1.0
    out.depth.ravel()[covered] = best[covered]
    out.count.ravel()[covered] = 1
    return out


__all__ = ["RenderSettings", "RenderOutput", "CloudGrads", "render", "render_backward",
           "zbuffer_render", "BACKENDS", "DEFAULT_BACKEND"]
