"""Pure NumPy rasterization backend.

Same contract as the compiled ``_kernels`` module: inputs are projected,
culled and sorted front to back. Instead of tiles it materializes every
(sphere, pixel) pair inside the spheres' bounding boxes, which is simple
and vectorized but memory-hungry for large clouds.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_HASH_MUL = np.uint64(0x9E3779B97F4A7C15)


def _pairs(u, v, cover, width, height):
    i0 = np.clip(np.ceil(u - cover - 0.5), 0, width).astype(np.int64)
    i1 = np.clip(np.floor(u + cover - 0.5), -1, width - 1).astype(np.int64)
    j0 = np.clip(np.ceil(v - cover - 0.5), 0, height).astype(np.int64)
    j1 = np.clip(np.floor(v + cover - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(i1 - i0 + 1, 0)
    ny = np.maximum(j1 - j0 + 1, 0)
    per = nx * ny
    sph = np.repeat(np.arange(u.size), per)
    local = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
    nxs = np.maximum(nx[sph], 1)
    px = i0[sph] + local % nxs
    py = j0[sph] + local // nxs
    dx = px + 0.5 - u[sph]
    dy = py + 0.5 - v[sph]
    dist2 = dx * dx + dy * dy
    keep = dist2 <= cover[sph] ** 2
    sph, px, py, dx, dy, dist2 = sph[keep], px[keep], py[keep], dx[keep], dy[keep], dist2[keep]
    pix = py * width + px
    # stable sort by pixel keeps front-to-back order within each pixel
    order = np.argsort(pix, kind="stable")
    sph, pix, dx, dy, dist2 = sph[order], pix[order], dx[order], dy[order], dist2[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    starts = np.flatnonzero(first)
    group = np.cumsum(first) - 1
    rank = np.arange(pix.size) - starts[group]
    return sph, pix, dx, dy, np.sqrt(dist2), rank


def _blend(u, v, rho, cover, d, z, feat, width, height, gamma, sharp, eps, kmax):
    sph, pix, dx, dy, dist, rank = _pairs(u, v, cover, width, height)
    keep = rank < kmax
    sph, pix, dx, dy, dist, rank = sph[keep], pix[keep], dx[keep], dy[keep], dist[keep], rank[keep]
    npx = width * height
    d0 = np.zeros(npx)
    first = rank == 0
    d0[pix[first]] = d[sph[first]]
    t = sharp * (rho[sph] - dist)
    alpha = expit(t)
    w = alpha * np.exp((d[sph] - d0[pix]) / gamma)
    count = np.bincount(pix, minlength=npx)
    S = np.bincount(pix, weights=w, minlength=npx)
    bgw = np.where(count > 0, (eps + 1.0) * np.exp(-d0 / gamma), 1.0)
    total = bgw + S
    return dict(sph=sph, pix=pix, dx=dx, dy=dy, dist=dist, t=t, alpha=alpha, w=w,
                count=count, S=S, bgw=bgw, total=total, d0=d0)


def forward(u, v, rho, cover, d, z, feat, idx, bg, width, height, gamma, sharp, eps,
            kmax, tile=None, nthreads=None):
    dim = feat.shape[1]
    b = _blend(u, v, rho, cover, d, z, feat, width, height, gamma, sharp, eps, kmax)
    sph, pix, w, total, npx = b["sph"], b["pix"], b["w"], b["total"], width * height
    acc = np.stack([np.bincount(pix, weights=w * feat[sph, c], minlength=npx)
                    for c in range(dim)], axis=1)
    out_feat = (acc + b["bgw"][:, None] * bg[None, :]) / total[:, None]
    alpha = b["S"] / total
    accz = np.bincount(pix, weights=w * z[sph], minlength=npx)
    has = b["count"] > 0
    depth = np.where(has, accz / np.where(has, b["S"], 1.0), 0.0)

    # winner / top-two margin: sort by (pixel, -w, rank) so ties go to the nearer sphere
    order = np.lexsort((np.arange(pix.size), -w, pix))
    ps, ws, ss = pix[order], w[order], sph[order]
    firstm = np.ones(ps.size, dtype=bool)
    firstm[1:] = ps[1:] != ps[:-1]
    best1 = np.zeros(npx)
    arg1 = np.full(npx, -1, dtype=np.int64)
    best1[ps[firstm]] = ws[firstm]
    arg1[ps[firstm]] = ss[firstm]
    secondm = np.zeros(ps.size, dtype=bool)
    secondm[1:] = (~firstm[1:]) & firstm[:-1]
    best2 = np.zeros(npx)
    best2[ps[secondm]] = ws[secondm]
    bgw = b["bgw"]
    bg_wins = bgw > best1
    winner = np.where(has & ~bg_wins, arg1, -1)
    top1 = np.where(bg_wins, bgw, best1)
    top2 = np.where(bg_wins, best1, np.maximum(best2, bgw))
    margin = np.where(has, (top1 - top2) / total, 1.0)

    key = np.zeros(npx, dtype=np.uint64)
    with np.errstate(over="ignore"):
        np.add.at(key, pix, (idx[sph].astype(np.uint64) + np.uint64(1)) * _HASH_MUL)

    shape = (height, width)
    return (out_feat.reshape(height, width, dim), alpha.reshape(shape), depth.reshape(shape),
            winner.reshape(shape), margin.reshape(shape),
            b["count"].astype(np.intc).reshape(shape), key.reshape(shape))


def backward(u, v, rho, cover, d, z, feat, idx, bg, width, height, gamma, sharp, eps,
             kmax, tile, nthreads, g_feat, g_alpha):
    dim = feat.shape[1]
    n = u.size
    npx = width * height
    b = _blend(u, v, rho, cover, d, z, feat, width, height, gamma, sharp, eps, kmax)
    sph, pix, w, total = b["sph"], b["pix"], b["w"], b["total"]
    acc = np.stack([np.bincount(pix, weights=w * feat[sph, c], minlength=npx)
                    for c in range(dim)], axis=1)
    F = (acc + b["bgw"][:, None] * bg[None, :]) / total[:, None]
    A = b["S"] / total
    gf = g_feat.reshape(npx, dim)
    wn = w / total[pix]
    g = np.einsum("pc,pc->p", gf[pix], feat[sph] - F[pix])
    if g_alpha is not None:
        g = g + g_alpha.reshape(npx)[pix] * (1.0 - A[pix])
    one_minus = expit(-b["t"])
    dt = wn * one_minus * g
    dist = b["dist"]
    safe = np.where(dist > 0, dist, 1.0)
    out = np.zeros((1, n, 4 + dim))
    out[0, :, 0] = np.bincount(sph, weights=np.where(dist > 0, sharp * dt * b["dx"] / safe, 0.0), minlength=n)
    out[0, :, 1] = np.bincount(sph, weights=np.where(dist > 0, sharp * dt * b["dy"] / safe, 0.0), minlength=n)
    out[0, :, 2] = np.bincount(sph, weights=sharp * dt, minlength=n)
    out[0, :, 3] = np.bincount(sph, weights=wn * g / gamma, minlength=n)
    for c in range(dim):
        out[0, :, 4 + c] = np.bincount(sph, weights=wn * gf[pix, c], minlength=n)
    return out
