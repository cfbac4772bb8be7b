"""Pull-push hole filling.

A classical, deterministic stand-in for a learned inpainting network: the
image is reduced to a weighted-average pyramid ("pull") and holes are then
filled coarse to fine from the level above ("push").
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import AllInvalid, ShapeError


def _pull(color: np.ndarray, weight: np.ndarray):
    h, w = weight.shape
    wc = (color * weight[..., None]).reshape(h // 2, 2, w // 2, 2, -1).sum(axis=(1, 3))
    ws = weight.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))
    safe = np.where(ws > 0, ws, 1.0)
    return wc / safe[..., None], np.minimum(ws, 1.0)


def _upsample(img: np.ndarray) -> np.ndarray:
    """2x bilinear upsampling (weights 3/4, 1/4) with edge replication."""
    def axis_up(a, ax):
        pad = [(0, 0)] * a.ndim
        pad[ax] = (1, 1)
        p = np.pad(a, pad, mode="edge")
        n = a.shape[ax]
        mid = np.take(p, np.arange(1, n + 1), axis=ax)
        lo = np.take(p, np.arange(0, n), axis=ax)
        hi = np.take(p, np.arange(2, n + 2), axis=ax)
        even = 0.75 * mid + 0.25 * lo
        odd = 0.75 * mid + 0.25 * hi
        out = np.stack([even, odd], axis=ax + 1)
        shape = list(a.shape)
        shape[ax] = 2 * n
        return out.reshape(shape)
    return axis_up(axis_up(img, 0), 1)


def pull_push(image: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Fill pixels whose weight is below one.

    ``weights`` may be a boolean validity mask or soft weights in [0, 1]
    (e.g. a rendered alpha). The output is ``w * image + (1 - w) * fill``,
    so pixels with weight 1 are returned unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    wt = np.ones((h, w)) if weights is None else np.asarray(weights, dtype=np.float64)
    if wt.shape != (h, w):
        raise ShapeError(f"weights {wt.shape} do not match image {(h, w)}")
    wt = np.clip(np.nan_to_num(wt), 0.0, 1.0)
    if not np.any(wt > 0):
        raise AllInvalid("pull_push needs at least one pixel with positive weight")

    size = 1 << int(np.ceil(np.log2(max(h, w, 1))))
    color = np.zeros((size, size, img.shape[2]))
    weight = np.zeros((size, size))
    color[:h, :w] = np.where(wt[..., None] > 0, img, 0.0)
    weight[:h, :w] = wt

    levels = [(color, weight)]
    while levels[-1][1].shape[0] > 1:
        levels.append(_pull(*levels[-1]))

    filled = levels[-1][0]
    for c, wl in reversed(levels[:-1]):
        coarse = _upsample(filled)
        filled = np.where(wl[..., None] >= 1.0, c, wl[..., None] * c + (1.0 - wl[..., None]) * coarse)

    out = filled[:h, :w]
    out = np.where(wt[..., None] >= 1.0, img, out)
    return out[..., 0] if squeeze else out
