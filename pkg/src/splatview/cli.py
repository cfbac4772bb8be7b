"""Command line interface: ``splatview <subcommand> [options]``.

Options may also come from a JSON file given with ``--config``; explicit
flags override the file, which overrides built-in defaults. Exit codes:
0 success, 2 usage or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments, scenegen
from .cloud import SphereCloud, radius_param_for
from .errors import NumericalDivergence, SplatviewError
from .geometry import Camera
from .imageio import (ImageIOError, load_view, read_camera, read_iuv_png, read_pfm,
                      read_rgb_png, write_camera, write_json, write_pfm, write_rgb_png)
from .losses import coverage, l1_loss, mask_bce, psnr, ssim
from .pipeline import fit_radii, sparse_cloud, synthesize
from .raster import RenderSettings, default_threads, render, render_backward
from .warping import consistency_value

log = logging.getLogger("splatview")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "render": dict(sparsity=1.0, seed=0, gamma=0.05, complete=False, radius=0.005,
                   fit_steps=0, gt=None, background=None, threads=None),
    "pipeline": dict(seed=0, target_iuv=None, radius=0.005, threads=None, occlusion_free=None),
    "bench": dict(size="512x512", spheres=100000, threads=None, frames=5, seed=0, backend=None,
                  backward=True),
    "dataset-gen": dict(count=1, seed=0, size=128, targets=4, occluder=True),
    "fit-radii": dict(steps=200, lr=0.05, optimize="radii", sparsity=1.0, seed=0, threads=None,
                      trace=None, targets=None, timing=False),
    "evaluate": dict(mask=None, pair=None),
    "sparsity-sweep": dict(fractions="0.05,0.1,0.25,1.0", steps=200, seed=0, threads=None,
                           out=None),
}

REQUIRED = {
    "render": ("input", "camera", "out"),
    "pipeline": ("input", "camera", "out"),
    "dataset-gen": ("out",),
    "fit-radii": ("input", "out"),
    "evaluate": ("pred", "gt"),
    "sparsity-sweep": ("input",),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatview", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a view directory from a new camera")
    p.add_argument("--input", default=None, help="view directory (rgb.png, depth.png, camera.json)")
    p.add_argument("--camera", default=None, help="target camera JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--sparsity", type=float, default=None, help="fraction of depth samples kept")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--radius", type=float, default=None, help="initial sphere radius (m)")
    p.add_argument("--fit-steps", type=int, default=None, help="radius fitting steps on the input view")
    p.add_argument("--complete", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gt", help="ground-truth view directory for metrics")
    p.add_argument("--background", help="r,g,b background color (default: from input)")
    p.add_argument("--threads", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("pipeline", help="render, transfer texture, fuse and complete")
    p.add_argument("--input", default=None)
    p.add_argument("--occlusion-free", default=None, help="view directory with iuv.png")
    p.add_argument("--camera", default=None)
    p.add_argument("--target-iuv", default=None, help="IUV PNG of the target view")
    p.add_argument("--out", default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("bench", help="time forward and backward passes")
    p.add_argument("--size", default=None, help="WxH")
    p.add_argument("--spheres", type=int, default=None)
    p.add_argument("--threads", default=None, help="thread count or comma list")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backend", choices=["compiled", "python"], default=None)
    p.add_argument("--backward", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    _add_common(p)

    p = sub.add_parser("dataset-gen", help="write ray-traced fixtures")
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--targets", type=int, default=None)
    p.add_argument("--occluder", action=argparse.BooleanOptionalAction, default=None)
    _add_common(p)

    p = sub.add_parser("fit-radii", help="fit sphere radii against target views")
    p.add_argument("--input", default=None)
    p.add_argument("--targets", default=None,
                   help="JSON manifest: list of view directories (default: the input view)")
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimize", default=None, help="comma list of radii,features,positions")
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", default=None, help="trace CSV path (default: OUT/trace.csv)")
    p.add_argument("--timing", action=argparse.BooleanOptionalAction, default=None,
                   help="record per-step wall time in the trace (breaks byte reproducibility)")
    p.add_argument("--threads", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("evaluate", help="compare a rendered view with ground truth")
    p.add_argument("--pred", default=None, help="render output directory")
    p.add_argument("--gt", default=None, help="ground-truth view directory")
    p.add_argument("--mask", default=None, help="mask PNG restricting l1/psnr")
    p.add_argument("--pair", default=None, help="second render directory for stereo consistency")
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("sparsity-sweep", help="PSNR versus depth sparsity")
    p.add_argument("--input", default=None, help="fixture directory or directory of fixtures")
    p.add_argument("--fractions", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    _add_common(p)
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from ``--config`` and then the defaults."""
    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
    for key, default in DEFAULTS.get(args.command, {}).items():
        key = key.replace("-", "_")
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, default))
    for key, val in config.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if getattr(args, "threads", None) is None and args.command != "bench":
        args.threads = default_threads()
    return args


def _parse_color(text) -> Optional[np.ndarray]:
    if text is None:
        return None
    try:
        vals = [float(x) for x in str(text).split(",")] if isinstance(text, str) else list(text)
    except ValueError as exc:
        raise UsageError(f"bad color {text!r}") from exc
    return np.asarray(vals, dtype=np.float64)


def _write_render(out: Path, res, cam: Camera) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_rgb_png(out / "rgb.png", res.image)
    write_pfm(out / "features.pfm", res.raw)
    write_pfm(out / "alpha.pfm", res.alpha)
    write_pfm(out / "depth.pfm", res.depth)
    # indices are exact in float32 below 2**24 spheres
    write_pfm(out / "winner.pfm", res.render.winner.astype(np.float32))
    write_camera(out / "camera.json", cam)


def cmd_render(args) -> int:
    frame, in_cam = load_view(args.input)
    cam = read_camera(args.camera)
    if args.gamma <= 0:
        raise UsageError("--gamma must be positive")
    cloud = sparse_cloud(frame, in_cam, args.sparsity, args.seed, args.radius)
    if args.fit_steps > 0:
        cloud, _ = fit_radii(cloud, [(in_cam, frame)], steps=args.fit_steps, threads=args.threads)
    bg = _parse_color(args.background)
    if bg is None:
        bg = experiments.estimate_background(frame)
    res = synthesize(cloud, cam, bg, RenderSettings(gamma=args.gamma), complete=args.complete,
                     threads=args.threads)
    out = Path(args.out)
    _write_render(out, res, cam)
    if args.gt:
        gt, _ = load_view(args.gt)
        metrics = {"psnr": psnr(res.image, gt.rgb), "ssim": ssim(res.image, gt.rgb)}
        if gt.fg_mask is not None and gt.fg_mask.any():
            metrics["coverage"] = coverage(res.alpha, gt.fg_mask)
        write_json(out / "metrics.json", metrics)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    frame, in_cam = load_view(args.input)
    cam = read_camera(args.camera)
    cloud = sparse_cloud(frame, in_cam, 1.0, args.seed, args.radius)
    bg = experiments.estimate_background(frame)
    free = None
    dst_iuv = read_iuv_png(args.target_iuv) if args.target_iuv else None
    if args.occlusion_free:
        free_frame, _ = load_view(args.occlusion_free)
        if free_frame.iuv is not None:
            free = (free_frame.rgb, free_frame.iuv)
    if free is None or dst_iuv is None:
        log.warning("IUV input missing: running the render-only path")
        free = None
    res = synthesize(cloud, cam, bg, complete=True, occlusion_free=free, dst_iuv=dst_iuv,
                     threads=args.threads)
    out = Path(args.out)
    _write_render(out, res, cam)
    if res.warped is not None:
        write_rgb_png(out / "warped.png", res.warped.image)
    return EXIT_OK


def _bench_cloud(n: int, width: int, height: int, seed: int):
    """Spheres scattered over a slightly wavy surface filling the view."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    f = 0.5 * (width + height)
    cam = Camera(f, f, width / 2, height / 2, width, height)
    u = rng.uniform(0, width, n)
    v = rng.uniform(0, height, n)
    z = 2.0 + 0.1 * np.sin(u / width * 6.0) * np.cos(v / height * 5.0)
    pos = np.stack([(u - cam.cx) * z / f, (v - cam.cy) * z / f, z], axis=1)
    # disc radius ~ 1.6 px at this density
    radius = np.full(n, 1.6 * 2.0 / f)
    cloud = SphereCloud(pos, rng.uniform(0, 1, (n, 3)), radius_param_for(radius))
    return cloud, cam


def cmd_bench(args) -> int:
    try:
        width, height = (int(x) for x in str(args.size).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must look like 512x512, got {args.size!r}") from exc
    if args.spheres < 1:
        raise UsageError("--spheres must be at least 1")
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    threads_list = ([int(t) for t in str(args.threads).split(",")] if args.threads is not None
                    else [default_threads()])
    cloud, cam = _bench_cloud(args.spheres, width, height, args.seed)
    settings = RenderSettings()
    results = []
    digest = None
    for t in threads_list:
        render(cloud, cam, settings, threads=t, backend=args.backend)  # warm-up
        t0 = time.perf_counter()
        for _ in range(args.frames):
            out = render(cloud, cam, settings, threads=t, backend=args.backend)
        fwd = (time.perf_counter() - t0) * 1e3 / args.frames
        bwd = None
        if args.backward:
            g = np.ones_like(out.features)
            t0 = time.perf_counter()
            render_backward(cloud, cam, settings, g, threads=t, backend=args.backend)
            bwd = (time.perf_counter() - t0) * 1e3
        h = hashlib.sha256(np.ascontiguousarray(out.features).tobytes()).hexdigest()
        if digest is not None and h != digest:
            log.warning("render differs across thread counts")
        digest = h
        results.append({"threads": t, "ms_per_frame_forward": fwd, "ms_backward": bwd,
                        "fps": 1e3 / fwd})
    report = dict(results[-1])
    report.update({"size": [width, height], "spheres": args.spheres, "frames": args.frames,
                   "backend": args.backend or "default", "checksum": digest,
                   "scaling": results})
    if len(results) > 1:
        report["speedup"] = results[0]["ms_per_frame_forward"] / results[-1]["ms_per_frame_forward"]
    if args.out:
        write_json(args.out, report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_dataset_gen(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fixtures = scenegen.make_fixture_suite(args.count, args.seed, n_targets=args.targets,
                                           size=args.size, occluder=args.occluder)
    manifest = []
    for k, fx in enumerate(fixtures):
        name = f"fixture_{k:03d}"
        experiments.save_fixture(fx, out / name)
        manifest.append(name)
    write_json(out / "manifest.json", {"seed": args.seed, "fixtures": manifest})
    return EXIT_OK


def cmd_fit_radii(args) -> int:
    frame, in_cam = load_view(args.input)
    views = [(in_cam, frame)]
    if args.targets:
        try:
            entries = json.loads(Path(args.targets).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read target manifest: {exc}") from exc
        if isinstance(entries, dict):
            entries = entries.get("targets", [])
        base = Path(args.targets).parent
        views = []
        for e in entries:
            fr, cam = load_view(base / e)
            views.append((cam, fr))
        if not views:
            raise UsageError("target manifest lists no views")
    optimize = tuple(s.strip() for s in str(args.optimize).split(",") if s.strip())
    cloud = sparse_cloud(frame, in_cam, args.sparsity, args.seed)
    try:
        fitted, trace = fit_radii(cloud, views, steps=args.steps, learning_rate=args.lr,
                                  threads=args.threads, optimize=optimize)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fitted.save(out / "cloud.npz")
    trace.to_csv(args.trace or out / "trace.csv", include_timing=args.timing)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred = read_rgb_png(pred_dir / "rgb.png")
    gt, _ = load_view(gt_dir)
    alpha = read_pfm(pred_dir / "alpha.pfm") if (pred_dir / "alpha.pfm").exists() else None
    fg = gt.fg_mask if gt.fg_mask is not None else gt.valid_mask
    mask = None
    if args.mask:
        from .imageio import read_mask_png
        mask = read_mask_png(args.mask)
    report = {
        "psnr": psnr(pred, gt.rgb, mask),
        "ssim": ssim(pred, gt.rgb),
        "l1": l1_loss(pred, gt.rgb, mask if mask is not None else (fg if fg.any() else None)),
        "coverage": coverage(alpha, fg) if alpha is not None and fg.any() else None,
        "mask_bce": mask_bce(alpha, fg.astype(np.float64)) if alpha is not None else None,
        "consistency": 0.0,
    }
    if args.pair:
        pair = Path(args.pair)
        cam_l = read_camera(pred_dir / "camera.json")
        cam_r = read_camera(pair / "camera.json")
        report["consistency"] = consistency_value(pred, read_rgb_png(pair / "rgb.png"),
                                                  read_pfm(pred_dir / "depth.pfm"), cam_l, cam_r)
    if args.out:
        write_json(args.out, report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sparsity_sweep(args) -> int:
    try:
        fractions = sorted(float(x) for x in str(args.fractions).split(","))
    except ValueError as exc:
        raise UsageError(f"bad --fractions {args.fractions!r}") from exc
    data = [experiments.load_fixture(d) for d in experiments.fixture_dirs(args.input)]
    rows = experiments.sparsity_sweep(data, fractions, seed=args.seed, steps=args.steps,
                                      threads=args.threads)
    lines = ["sparsity,psnr,ssim,coverage"]
    lines += [f"{r.fraction:g},{r.psnr:.6f},{r.ssim:.6f},{r.coverage:.6f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "render": cmd_render,
    "pipeline": cmd_pipeline,
    "bench": cmd_bench,
    "dataset-gen": cmd_dataset_gen,
    "fit-radii": cmd_fit_radii,
    "evaluate": cmd_evaluate,
    "sparsity-sweep": cmd_sparsity_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(args)
        return COMMANDS[args.command](args)
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ImageIOError, SplatviewError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
