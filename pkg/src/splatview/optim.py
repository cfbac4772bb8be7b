"""Gradient-based fitting of sphere-cloud parameters to target views."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .cloud import SphereCloud
from .errors import NumericalDivergence
from .geometry import Camera
from .losses import DEFAULT_WEIGHTS, l1_loss, mask_bce
from .raster import RenderSettings, render, render_backward
from .warping import consistency_value

log = logging.getLogger(__name__)

PARAM_GROUPS = ("radii", "features", "positions")

# Soft blending used while fitting radii: a wide sigmoid tail lets pixels
# just outside a disc pull on its radius, which hard discs cannot do, and a
# heavier background keeps soft coverage from overstating hard coverage.
FIT_SETTINGS = RenderSettings(gamma=1.0, sharpness=1.0, tail=3.0, eps=1.0)


@dataclass
class FitTarget:
    camera: Camera
    image: np.ndarray
    mask: Optional[np.ndarray] = None  # foreground mask, may be soft
    l1_mask: Optional[np.ndarray] = None  # defaults to ``mask > 0.5`` (or all pixels)


@dataclass
class FitConfig:
    steps: int = 200
    learning_rate: float = 0.05
    optimize: Tuple[str, ...] = ("radii",)
    targets: List[FitTarget] = field(default_factory=list)
    weights: Tuple[float, float, float] = DEFAULT_WEIGHTS
    settings: RenderSettings = FIT_SETTINGS
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    stereo_pair: Optional[Tuple[int, int]] = None
    log_every: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        opt = tuple(self.optimize)
        if not opt or any(o not in PARAM_GROUPS for o in opt):
            raise ValueError(f"optimize must be a non-empty subset of {PARAM_GROUPS}")
        self.optimize = opt
        if not self.targets:
            raise ValueError("at least one target is required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class FitTrace:
    total: List[float] = field(default_factory=list)
    l1: List[float] = field(default_factory=list)
    bce: List[float] = field(default_factory=list)
    cons: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    ms: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)

    def rows(self):
        for k in range(len(self)):
            yield (k, self.total[k], self.l1[k], self.bce[k], self.cons[k],
                   self.grad_norm[k], self.ms[k])

    def to_csv(self, path, include_timing: bool = True) -> None:
        with open(path, "w") as fh:
            fh.write("step,total,l1,bce,cons,grad_norm,ms\n")
            for row in self.rows():
                ms = f"{row[6]:.3f}" if include_timing else "0"
                fh.write(f"{row[0]},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g},"
                         f"{row[4]:.17g},{row[5]:.17g},{ms}\n")


def _get(cloud: SphereCloud, group: str) -> np.ndarray:
    return {"radii": cloud.radius_params, "features": cloud.features,
            "positions": cloud.positions}[group]


def _with(cloud: SphereCloud, params: Dict[str, np.ndarray]) -> SphereCloud:
    kw = {}
    if "radii" in params:
        kw["radius_params"] = params["radii"]
    if "features" in params:
        kw["features"] = params["features"]
    if "positions" in params:
        kw["positions"] = params["positions"]
    return cloud.replace(**kw)


def evaluate_objective(cloud: SphereCloud, config: FitConfig, with_grad: bool = True):
    """Loss terms averaged over targets and, optionally, their gradients."""
    w_i, w_m, w_c = config.weights
    n_t = len(config.targets)
    l1_sum = bce_sum = 0.0
    grads = {g: np.zeros_like(_get(cloud, g)) for g in config.optimize} if with_grad else None
    renders = []
    for tgt in config.targets:
        out = render(cloud, tgt.camera, config.settings, threads=config.threads)
        renders.append(out)
        gt_mask = tgt.mask if tgt.mask is not None else np.ones(out.alpha.shape)
        l1m = tgt.l1_mask
        if l1m is None:
            l1m = np.asarray(gt_mask) > 0.5 if tgt.mask is not None else None
        l1, g_f = l1_loss(out.features, tgt.image, l1m, return_grad=True)
        bce, g_a = mask_bce(out.alpha, gt_mask, return_grad=True)
        l1_sum += l1
        bce_sum += bce
        if with_grad:
            cg = render_backward(cloud, tgt.camera, config.settings, w_i * g_f / n_t,
                                 w_m * g_a / n_t, threads=config.threads)
            for g in config.optimize:
                grads[g] += {"radii": cg.d_radius_params, "features": cg.d_features,
                             "positions": cg.d_positions}[g]
    cons = 0.0
    if config.stereo_pair is not None:
        a, b = config.stereo_pair
        ra, rb = renders[a], renders[b]
        try:
            cons = consistency_value(ra.features, rb.features, ra.depth,
                                     config.targets[a].camera, config.targets[b].camera)
        except Exception as exc:  # no overlap: treat as no stereo signal
            log.debug("consistency skipped: %s", exc)
    l1, bce = l1_sum / n_t, bce_sum / n_t
    total = w_i * l1 + w_m * bce + w_c * cons
    return (l1, bce, cons, total), grads


def fit(cloud: SphereCloud, config: FitConfig):
    """Optimize the selected parameter groups; returns ``(cloud, trace)``.

    Each trace entry describes the parameters *before* that step's update.
    The consistency term, when a stereo pair is configured, is reported and
    included in the total but not differentiated.
    """
    params = {g: _get(cloud, g).copy() for g in config.optimize}
    m = {g: np.zeros_like(p) for g, p in params.items()}
    v = {g: np.zeros_like(p) for g, p in params.items()}
    b1, b2 = config.betas
    trace = FitTrace()
    current = cloud
    for step in range(config.steps):
        t0 = time.perf_counter()
        (l1, bce, cons, total), grads = evaluate_objective(current, config)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        trace.total.append(total)
        trace.l1.append(l1)
        trace.bce.append(bce)
        trace.cons.append(cons)
        trace.grad_norm.append(gnorm)
        if not (np.isfinite(total) and np.isfinite(gnorm)):
            trace.ms.append((time.perf_counter() - t0) * 1e3)
            raise NumericalDivergence(f"non-finite loss at step {step}", trace)
        lr = config.learning_rate
        for g in config.optimize:
            if config.optimizer == "sgd":
                params[g] = params[g] - lr * grads[g]
                continue
            m[g] = b1 * m[g] + (1 - b1) * grads[g]
            v[g] = b2 * v[g] + (1 - b2) * grads[g] ** 2
            mhat = m[g] / (1 - b1 ** (step + 1))
            vhat = v[g] / (1 - b2 ** (step + 1))
            params[g] = params[g] - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        current = _with(cloud, params)
        trace.ms.append((time.perf_counter() - t0) * 1e3)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total %.6g l1 %.6g bce %.6g |g| %.3g", step, total, l1, bce, gnorm)
    return current, trace
