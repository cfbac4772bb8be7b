"""Central finite-difference checks of the renderer's vector-Jacobian product.

The scalar probed is ``L = sum(G * features) + sum(Ga * alpha)`` for fixed
random upstream images ``G`` and ``Ga``. Probes whose +h and -h renders
blend different sphere sets at some pixel straddle a kink of the renderer
(a disc edge or the per-pixel cap) and are reported as skipped rather than
compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cloud import SphereCloud
from .geometry import Camera
from .raster import RenderSettings, render, render_backward

KINDS = ("position", "radius", "feature")


@dataclass
class Probe:
    kind: str
    sphere: int
    coord: int
    analytic: float
    numeric: float
    skipped: bool

    @property
    def rel_error(self) -> float:
        if self.analytic == 0:
            return 0.0 if self.numeric == 0 else np.inf
        return abs(self.analytic - self.numeric) / abs(self.analytic)


def _perturbed(cloud: SphereCloud, kind: str, i: int, j: int, delta: float) -> SphereCloud:
    if kind == "position":
        p = cloud.positions.copy()
        p[i, j] += delta
        return cloud.replace(positions=p)
    if kind == "radius":
        r = cloud.radius_params.copy()
        r[i] += delta
        return cloud.replace(radius_params=r)
    f = cloud.features.copy()
    f[i, j] += delta
    return cloud.replace(features=f)


def check_gradients(cloud: SphereCloud, cam: Camera, settings: RenderSettings, n_probes: int,
                    rng: np.random.Generator, h: float = 1e-5, backend: Optional[str] = None,
                    threads: Optional[int] = None) -> List[Probe]:
    g_feat = rng.normal(size=(cam.height, cam.width, cloud.dim))
    g_alpha = rng.normal(size=(cam.height, cam.width))
    grads = render_backward(cloud, cam, settings, g_feat, g_alpha, threads=threads, backend=backend)
    base = render(cloud, cam, settings, threads=threads, backend=backend)
    # probe spheres that reach at least one pixel; others have zero gradient
    touched = np.unique(base.winner[base.winner >= 0]) if np.any(base.count) else np.arange(0)
    pool = touched if touched.size else np.arange(len(cloud))
    probes = []
    for _ in range(n_probes):
        kind = KINDS[int(rng.integers(3))]
        i = int(pool[rng.integers(pool.size)])
        j = int(rng.integers(3 if kind == "position" else cloud.dim))
        analytic = {"position": grads.d_positions[i, j], "radius": grads.d_radius_params[i],
                    "feature": grads.d_features[i, j]}[kind]
        plus = render(_perturbed(cloud, kind, i, j, h), cam, settings, threads=threads, backend=backend)
        minus = render(_perturbed(cloud, kind, i, j, -h), cam, settings, threads=threads, backend=backend)
        skipped = not (np.array_equal(plus.key, minus.key) and np.array_equal(plus.count, minus.count))
        # difference per pixel first, then reduce: avoids cancelling two large sums
        numeric = (np.sum(g_feat * (plus.features - minus.features))
                   + np.sum(g_alpha * (plus.alpha - minus.alpha))) / (2 * h)
        probes.append(Probe(kind, i, j, float(analytic), float(numeric), skipped))
    return probes
