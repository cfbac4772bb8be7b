"""Training objectives and image quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import EmptyMask, ShapeError
from .warping import consistency_value

BCE_EPS = 1e-7
PSNR_CAP = 99.0
DEFAULT_WEIGHTS = (1.0, 0.5, 0.5)


def _pixel_mask(mask, shape2) -> np.ndarray:
    if mask is None:
        return np.ones(shape2, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape2:
        raise ShapeError(f"mask {m.shape} does not match image {shape2}")
    return m


def l1_loss(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
            return_grad: bool = False):
    """Mean absolute error over masked pixels (all channels).

    With ``return_grad`` also returns ``d loss / d pred``, which is
    ``sign(pred - gt) / count`` inside the mask and zero elsewhere.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    m = _pixel_mask(mask, p.shape[:2])
    if not m.any():
        raise EmptyMask("l1 mask selects no pixels")
    mm = m[..., None] if p.ndim == 3 else m
    count = m.sum() * (p.shape[2] if p.ndim == 3 else 1)
    diff = p - g
    loss = float(np.abs(diff)[np.broadcast_to(mm, p.shape)].sum() / count)
    if not return_grad:
        return loss
    return loss, np.where(mm, np.sign(diff), 0.0) / count


def mask_bce(pred_mask: np.ndarray, gt_mask: np.ndarray, return_grad: bool = False):
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps].

    The gradient is zero where the clamp is active.
    """
    p = np.asarray(pred_mask, dtype=np.float64)
    g = np.asarray(gt_mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc))
    loss = float(terms.mean())
    if not return_grad:
        return loss
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    grad = np.where(active, (pc - g) / (pc * (1.0 - pc)), 0.0) / p.size
    return loss, grad


def consistency_loss(I_L, I_R, depth_L, cam_L, cam_R) -> float:
    """Stereo consistency: mean ``|I_L - W(I_R)|`` over valid pixels."""
    return consistency_value(I_L, I_R, depth_L, cam_L, cam_R)


# Hooks for learned loss terms (perceptual, adversarial). They need
# pretrained networks and are not shipped; registering a callable
# ``f(pred, gt) -> float`` under a name adds ``weight * f`` to the image term.
ExtraTerm = Callable[[np.ndarray, np.ndarray], float]


def perceptual_loss(pred, gt) -> float:
    raise NotImplementedError("perceptual loss needs a pretrained feature network")


def hinge_gan_loss(pred, gt) -> float:
    raise NotImplementedError("adversarial loss needs a trained discriminator")


@dataclass
class LossReport:
    l1: float
    mask_bce: float
    consistency: float
    total: float
    term_weights: Tuple[float, float, float] = DEFAULT_WEIGHTS
    extras: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"l1": self.l1, "mask_bce": self.mask_bce, "consistency": self.consistency,
                "total": self.total}


def photometric_total(pred, gt, pred_mask, gt_mask, stereo: Optional[tuple] = None,
                      weights: Tuple[float, float, float] = DEFAULT_WEIGHTS,
                      l1_mask: Optional[np.ndarray] = None,
                      extra_terms: Optional[Dict[str, Tuple[float, ExtraTerm]]] = None) -> LossReport:
    """Weighted sum ``w_i * L_i + w_m * L_m + w_c * L_c``.

    ``L_i`` is the l1 term plus any registered ``extra_terms``; ``stereo``
    is ``(I_L, I_R, depth_L, cam_L, cam_R)`` or ``None`` for ``L_c = 0``.
    """
    w_i, w_m, w_c = weights
    l1 = l1_loss(pred, gt, l1_mask)
    extras = {}
    image_term = l1
    for name, (wt, fn) in (extra_terms or {}).items():
        extras[name] = float(fn(pred, gt))
        image_term += wt * extras[name]
    bce = mask_bce(pred_mask, gt_mask)
    cons = consistency_loss(*stereo) if stereo is not None else 0.0
    total = w_i * image_term + w_m * bce + w_c * cons
    return LossReport(l1, bce, cons, total, (w_i, w_m, w_c), extras)


def psnr(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
         peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    m = _pixel_mask(mask, p.shape[:2])
    if not m.any():
        raise EmptyMask("psnr mask selects no pixels")
    mse = float(((p - g) ** 2)[m].mean())
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    pad = win.size // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11, sigma: float = 1.5,
         K1: float = 0.01, K2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window.

    Statistics use population (biased) moments; only windows fully inside
    the image contribute, and channels are averaged.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    if min(p.shape[:2]) < window:
        raise ShapeError(f"image smaller than the {window}x{window} window")
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    win = _gaussian_window(window, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    scores = []
    for k in range(p.shape[2]):
        a, b = p[..., k], g[..., k]
        mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
        va = _filter_valid(a * a, win) - mu_a ** 2
        vb = _filter_valid(b * b, win) - mu_b ** 2
        cov = _filter_valid(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def coverage(weights: np.ndarray, region: Optional[np.ndarray] = None,
             threshold: float = 0.5) -> float:
    """Fraction of ``region`` pixels whose alpha/validity reaches ``threshold``."""
    w = np.asarray(weights, dtype=np.float64)
    m = _pixel_mask(region, w.shape)
    if not m.any():
        raise EmptyMask("coverage region is empty")
    return float((w[m] >= threshold).mean())
