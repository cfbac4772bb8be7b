"""Experiment drivers shared by the command line and the acceptance tests.

A fixture on disk is a directory with ``scene.json`` (optional), an
``input/`` view, an optional ``occlusion_free/`` view and ``target_XX/``
views, each in the layout read by :func:`imageio.load_view`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import scenegen
from .cloud import RGBDFrame
from .geometry import Camera, camera_to_world, unproject_pixel
from .imageio import ImageIOError, load_view, save_view
from .losses import coverage, psnr, ssim
from .pipeline import fit_radii, sparse_cloud, synthesize
from .raster import render
from .warping import forward_depth_warp

SWEEP_FRACTIONS = (0.05, 0.10, 0.25, 1.0)
View = Tuple[RGBDFrame, Camera]


@dataclass
class FixtureData:
    input: View
    targets: List[View]
    occlusion_free: Optional[View] = None
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene: Optional[scenegen.SceneSpec] = None
    name: str = ""


def fixture_data(fx: scenegen.Fixture, name: str = "") -> FixtureData:
    """Ray-trace every view of a generated fixture."""
    view = lambda cam: (scenegen.raytrace(fx.scene, cam), cam)  # noqa: E731
    return FixtureData(view(fx.input_camera), [view(c) for c in fx.target_cameras],
                       view(fx.occlusion_free_camera), fx.scene.background, fx.scene, name)


def save_fixture(fx: scenegen.Fixture, directory) -> None:
    d = Path(directory)
    data = fixture_data(fx)
    save_view(d / "input", *data.input)
    save_view(d / "occlusion_free", *data.occlusion_free)
    for k, v in enumerate(data.targets):
        save_view(d / f"target_{k:02d}", *v)
    (d / "scene.json").write_text(fx.scene.to_json() + "\n")


def load_fixture(directory) -> FixtureData:
    d = Path(directory)
    if not (d / "input").is_dir():
        raise ImageIOError(f"{d}: not a fixture directory (missing input/)")
    scene = None
    if (d / "scene.json").exists():
        scene = scenegen.SceneSpec.from_json((d / "scene.json").read_text())
    inp = load_view(d / "input")
    free = load_view(d / "occlusion_free") if (d / "occlusion_free").is_dir() else None
    targets = [load_view(p) for p in sorted(d.glob("target_*")) if p.is_dir()]
    bg = scene.background if scene is not None else estimate_background(inp[0])
    return FixtureData(inp, targets, free, tuple(bg), scene, d.name)


def fixture_dirs(root) -> List[Path]:
    """A single fixture directory, or every fixture below ``root``."""
    root = Path(root)
    if (root / "input").is_dir():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "input").is_dir()) if root.is_dir() else []
    if not found:
        raise ImageIOError(f"no fixtures found under {root}")
    return found


def estimate_background(frame: RGBDFrame) -> np.ndarray:
    bg = ~(frame.fg_mask if frame.fg_mask is not None else frame.valid_mask)
    if not bg.any():
        return np.zeros(frame.rgb.shape[2])
    return np.median(frame.rgb[bg], axis=0)


def covisible(depth_a: np.ndarray, cam_a: Camera, depth_b: np.ndarray, cam_b: Camera,
              tol: float = 0.01) -> np.ndarray:
    """Pixels of view A whose surface point view B also sees, by depth test
    against B's dense depth map (nearest pixel, relative tolerance)."""
    rows, cols = np.nonzero(depth_a > 0)
    out = np.zeros(depth_a.shape, dtype=bool)
    if rows.size == 0:
        return out
    pts = camera_to_world(unproject_pixel(cols + 0.5, rows + 0.5, depth_a[rows, cols], cam_a),
                          cam_a.pose)
    p = cam_b.pose.apply(pts)
    z = p[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = np.floor(cam_b.fx * p[:, 0] / zs + cam_b.cx).astype(np.int64)
    v = np.floor(cam_b.fy * p[:, 1] / zs + cam_b.cy).astype(np.int64)
    ok = (z > 0) & (u >= 0) & (u < cam_b.width) & (v >= 0) & (v < cam_b.height)
    db = np.zeros_like(z)
    db[ok] = depth_b[v[ok], u[ok]]
    ok &= (db > 0) & (np.abs(db - z) <= tol * z)
    out[rows[ok], cols[ok]] = True
    return out


@dataclass
class DensityResult:
    sphere_coverage: List[float]
    warp_coverage: List[float]
    l1_initial: float
    l1_final: float


def density_experiment(data: FixtureData, fraction: float = 0.1, seed: int = 0,
                       steps: int = 200, threads: Optional[int] = None) -> DensityResult:
    """Coverage of fitted sphere renders versus pixel-sized forward warping.

    Radii are fitted against the input and target views; coverage is the
    share of each view's foreground that the input camera also sees and
    that ends up with alpha >= 0.5 (or a warped sample).
    """
    frame, cam = data.input
    sparse = frame.sparsified(fraction, seed)
    cloud = sparse_cloud(frame, cam, fraction, seed)
    views = [data.input] + data.targets
    fitted, trace = fit_radii(cloud, [(c, f) for f, c in views], steps=steps, threads=threads)
    sph, fw = [], []
    for f, c in views:
        region = covisible(f.depth, c, frame.depth, cam)
        if not region.any():
            continue
        out = render(fitted, c, threads=threads)
        sph.append(coverage(out.alpha, region))
        fw.append(coverage(forward_depth_warp(sparse, cam, c).validity, region))
    return DensityResult(sph, fw, trace.l1[0], trace.l1[-1])


@dataclass
class SweepRow:
    fraction: float
    psnr: float
    ssim: float
    coverage: float
    n_views: int = 0
    per_fixture: List[float] = field(default_factory=list)


def sparsity_sweep(fixtures: Sequence[FixtureData], fractions=SWEEP_FRACTIONS, seed: int = 0,
                   steps: int = 200, threads: Optional[int] = None) -> List[SweepRow]:
    """Fit radii at each depth fraction, synthesize every target view with
    pull-push completion and average PSNR / SSIM / coverage."""
    rows = []
    for frac in sorted(fractions):
        ps, ss, cv, per = [], [], [], []
        for data in fixtures:
            frame, cam = data.input
            cloud = sparse_cloud(frame, cam, frac, seed)
            views = [data.input] + data.targets
            fitted, _ = fit_radii(cloud, [(c, f) for f, c in views], steps=steps, threads=threads)
            fp = []
            for f, c in data.targets:
                res = synthesize(fitted, c, data.background, threads=threads)
                fp.append(psnr(res.image, f.rgb))
                ss.append(ssim(res.image, f.rgb))
                if f.fg_mask is not None and f.fg_mask.any():
                    cv.append(coverage(res.alpha, f.fg_mask))
            ps.extend(fp)
            per.append(float(np.mean(fp)) if fp else float("nan"))
        rows.append(SweepRow(frac, float(np.mean(ps)), float(np.mean(ss)),
                             float(np.mean(cv)) if cv else float("nan"), len(ps), per))
    return rows


def occluded_region(data: FixtureData, target: int) -> np.ndarray:
    """Subject pixels of a target view hidden from the input camera by an
    occluder (needs the scene description)."""
    if data.scene is None:
        raise ValueError("occluded region needs the scene description")
    frame, cam = data.targets[target]
    in_cam = data.input[1]
    seen = scenegen.visible_from(data.scene, frame, cam, in_cam)
    seen_free = scenegen.visible_from(data.scene, frame, cam, in_cam, include_occluders=False)
    occ_parts = [p.part_id for p in data.scene.primitives if p.occluder]
    if frame.iuv is None:
        raise ValueError("occluded region needs the target IUV map")
    subject = ~np.isin(np.rint(frame.iuv[..., 0]), occ_parts)
    return subject & (frame.depth > 0) & seen_free & ~seen


@dataclass
class FusionResult:
    target: int
    region_pixels: int
    psnr_render: float
    psnr_fused: float


def fusion_experiment(data: FixtureData, min_pixels: int = 30,
                      threads: Optional[int] = None) -> List[FusionResult]:
    """Occluded-region PSNR of render-only versus render + IUV transfer + fuse."""
    frame, cam = data.input
    cloud = sparse_cloud(frame, cam, 1.0, 0)
    free_frame = data.occlusion_free[0]
    results = []
    for k, (f, c) in enumerate(data.targets):
        region = occluded_region(data, k)
        if region.sum() < min_pixels:
            continue
        base = synthesize(cloud, c, data.background, dst_iuv=f.iuv, threads=threads)
        fused = synthesize(cloud, c, data.background, dst_iuv=f.iuv,
                           occlusion_free=(free_frame.rgb, free_frame.iuv), threads=threads)
        results.append(FusionResult(k, int(region.sum()), psnr(base.image, f.rgb, region),
                                    psnr(fused.image, f.rgb, region)))
    return results

