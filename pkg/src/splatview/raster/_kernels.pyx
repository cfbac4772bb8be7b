# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Tiled sphere rasterization kernels (forward and vector-Jacobian product).

Inputs are already projected, culled and sorted front to back. Each tile
walks its sphere list in that order and scatters into its own pixels, so
the first ``kmax`` covering spheres a pixel sees are its ``kmax`` nearest.
Tiles are distributed over OpenMP threads with a static round-robin
schedule; backward partial sums go to per-thread buffers that the caller
reduces in thread order, which keeps results bit-stable for a fixed thread
count.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor, ceil
from libc.string cimport memset
from cython.parallel cimport prange, threadid

cnp.import_array()

ctypedef unsigned long long u64

cdef u64 HASH_MUL = 0x9E3779B97F4A7C15ULL

ctypedef struct Scene:
    const double* u
    const double* v
    const double* rho
    const double* cover
    const double* d
    const double* z
    const double* feat
    const long long* idx
    const int* i0
    const int* i1
    const int* j0
    const int* j1
    const long long* tile_start
    const long long* tile_items
    const double* bg
    int n
    int dim
    int width
    int height
    int tile
    int tiles_x
    double gamma
    double sharp
    double eps
    int kmax


ctypedef struct TileState:
    int* cnt
    double* d0
    double* S
    double* acc
    double* accz
    double* best1
    double* best2
    long long* arg1
    u64* key


cdef inline void _bind_state(TileState* st, double* dws, int* iws, long long* lws, u64* kws,
                             int npix, int dim) noexcept nogil:
    st.cnt = iws
    st.arg1 = lws
    st.key = kws
    st.d0 = dws
    st.S = dws + npix
    st.accz = dws + 2 * npix
    st.best1 = dws + 3 * npix
    st.best2 = dws + 4 * npix
    st.acc = dws + 5 * npix


cdef inline int _dws_size(int npix, int dim) noexcept nogil:
    # state (5 + dim per pixel) plus the backward feature buffer (dim per pixel)
    return npix * (5 + 2 * dim)


cdef inline double _sigmoid(double t) noexcept nogil:
    if t >= 0:
        return 1.0 / (1.0 + exp(-t))
    cdef double e = exp(t)
    return e / (1.0 + e)


cdef void _accumulate(const Scene* sc, int t, TileState* st) noexcept nogil:
    """Blend all covering spheres of tile ``t`` into the unnormalized state."""
    cdef int tile = sc.tile
    cdef int npix = tile * tile
    cdef int dim = sc.dim
    cdef int x0 = (t % sc.tiles_x) * tile
    cdef int y0 = (t // sc.tiles_x) * tile
    cdef int x1 = x0 + tile - 1
    cdef int y1 = y0 + tile - 1
    cdef long long k, r
    cdef int ia, ib, ja, jb, i, j, p, c
    cdef double dx, dy, dist2, cov2, alpha, w, uu, vv
    if x1 > sc.width - 1:
        x1 = sc.width - 1
    if y1 > sc.height - 1:
        y1 = sc.height - 1
    memset(st.cnt, 0, npix * sizeof(int))
    memset(st.S, 0, npix * sizeof(double))
    memset(st.acc, 0, npix * dim * sizeof(double))
    memset(st.accz, 0, npix * sizeof(double))
    memset(st.best1, 0, npix * sizeof(double))
    memset(st.best2, 0, npix * sizeof(double))
    memset(st.key, 0, npix * sizeof(u64))
    for p in range(npix):
        st.arg1[p] = -1
        st.d0[p] = 0.0
    for k in range(sc.tile_start[t], sc.tile_start[t + 1]):
        r = sc.tile_items[k]
        ia = sc.i0[r] if sc.i0[r] > x0 else x0
        ib = sc.i1[r] if sc.i1[r] < x1 else x1
        ja = sc.j0[r] if sc.j0[r] > y0 else y0
        jb = sc.j1[r] if sc.j1[r] < y1 else y1
        uu = sc.u[r]
        vv = sc.v[r]
        cov2 = sc.cover[r] * sc.cover[r]
        for j in range(ja, jb + 1):
            dy = j + 0.5 - vv
            for i in range(ia, ib + 1):
                dx = i + 0.5 - uu
                dist2 = dx * dx + dy * dy
                if dist2 > cov2:
                    continue
                p = (j - y0) * tile + (i - x0)
                if st.cnt[p] >= sc.kmax:
                    continue
                alpha = _sigmoid(sc.sharp * (sc.rho[r] - sqrt(dist2)))
                if st.cnt[p] == 0:
                    st.d0[p] = sc.d[r]
                w = alpha * exp((sc.d[r] - st.d0[p]) / sc.gamma)
                st.S[p] += w
                for c in range(dim):
                    st.acc[p * dim + c] += w * sc.feat[r * dim + c]
                st.accz[p] += w * sc.z[r]
                if w > st.best1[p]:
                    st.best2[p] = st.best1[p]
                    st.best1[p] = w
                    st.arg1[p] = r
                elif w > st.best2[p]:
                    st.best2[p] = w
                st.key[p] += <u64> (sc.idx[r] + 1) * HASH_MUL
                st.cnt[p] += 1


cdef inline double _bg_weight(const Scene* sc, const TileState* st, int p) noexcept nogil:
    if st.cnt[p] == 0:
        return 1.0
    return (sc.eps + 1.0) * exp(-st.d0[p] / sc.gamma)


cdef void _forward_tile(const Scene* sc, int t, double* dws, int* iws, long long* lws, u64* kws,
                        double* out_feat, double* out_alpha, double* out_depth,
                        long long* out_winner, double* out_margin, int* out_count,
                        u64* out_key) noexcept nogil:
    cdef int tile = sc.tile
    cdef int dim = sc.dim
    cdef int x0 = (t % sc.tiles_x) * tile
    cdef int y0 = (t // sc.tiles_x) * tile
    cdef int i, j, p, c
    cdef long long q
    cdef double bgw, total, top1, top2
    cdef TileState state
    cdef TileState* st = &state
    _bind_state(st, dws, iws, lws, kws, tile * tile, dim)
    _accumulate(sc, t, st)
    for j in range(y0, y0 + tile):
        if j >= sc.height:
            break
        for i in range(x0, x0 + tile):
            if i >= sc.width:
                break
            p = (j - y0) * tile + (i - x0)
            q = <long long> j * sc.width + i
            bgw = _bg_weight(sc, st, p)
            total = bgw + st.S[p]
            for c in range(dim):
                out_feat[q * dim + c] = (st.acc[p * dim + c] + bgw * sc.bg[c]) / total
            out_alpha[q] = st.S[p] / total
            out_count[q] = st.cnt[p]
            out_key[q] = st.key[p]
            if st.cnt[p] == 0:
                out_depth[q] = 0.0
                out_winner[q] = -1
                out_margin[q] = 1.0
                continue
            out_depth[q] = st.accz[p] / st.S[p]
            if bgw > st.best1[p]:
                out_winner[q] = -1
                top1 = bgw
                top2 = st.best1[p]
            else:
                out_winner[q] = st.arg1[p]
                top1 = st.best1[p]
                top2 = st.best2[p] if st.best2[p] > bgw else bgw
            out_margin[q] = (top1 - top2) / total


cdef void _backward_tile(const Scene* sc, int t, double* dws, int* iws, long long* lws, u64* kws,
                         const double* g_feat, const double* g_alpha, double* gbuf) noexcept nogil:
    """Per-sphere partial gradients of tile ``t`` into ``gbuf``.

    ``gbuf`` rows hold (d/du, d/dv, d/drho, d/dd, d/dfeat[dim]).
    """
    cdef int tile = sc.tile
    cdef int npix = tile * tile
    cdef int dim = sc.dim
    cdef int stride = 4 + dim
    cdef int x0 = (t % sc.tiles_x) * tile
    cdef int y0 = (t // sc.tiles_x) * tile
    cdef int x1 = x0 + tile - 1
    cdef int y1 = y0 + tile - 1
    cdef long long k, r, q
    cdef int ia, ib, ja, jb, i, j, p, c
    cdef double dx, dy, dist2, dist, cov2, tt, alpha, one_minus, w, g, dt, ga, uu, vv
    cdef TileState state
    cdef TileState* st = &state
    _bind_state(st, dws, iws, lws, kws, npix, dim)
    cdef double* fbuf = dws + npix * (5 + dim)
    cdef double* total = st.best1
    cdef double* amap = st.best2
    cdef double* row
    if x1 > sc.width - 1:
        x1 = sc.width - 1
    if y1 > sc.height - 1:
        y1 = sc.height - 1
    _accumulate(sc, t, st)
    for p in range(npix):
        total[p] = _bg_weight(sc, st, p) + st.S[p]
        amap[p] = st.S[p] / total[p]
        for c in range(dim):
            fbuf[p * dim + c] = (st.acc[p * dim + c] + (total[p] - st.S[p]) * sc.bg[c]) / total[p]
        st.cnt[p] = 0
    for k in range(sc.tile_start[t], sc.tile_start[t + 1]):
        r = sc.tile_items[k]
        ia = sc.i0[r] if sc.i0[r] > x0 else x0
        ib = sc.i1[r] if sc.i1[r] < x1 else x1
        ja = sc.j0[r] if sc.j0[r] > y0 else y0
        jb = sc.j1[r] if sc.j1[r] < y1 else y1
        uu = sc.u[r]
        vv = sc.v[r]
        cov2 = sc.cover[r] * sc.cover[r]
        row = gbuf + r * stride
        for j in range(ja, jb + 1):
            dy = j + 0.5 - vv
            for i in range(ia, ib + 1):
                dx = i + 0.5 - uu
                dist2 = dx * dx + dy * dy
                if dist2 > cov2:
                    continue
                p = (j - y0) * tile + (i - x0)
                if st.cnt[p] >= sc.kmax:
                    continue
                st.cnt[p] += 1
                q = <long long> j * sc.width + i
                dist = sqrt(dist2)
                tt = sc.sharp * (sc.rho[r] - dist)
                alpha = _sigmoid(tt)
                one_minus = _sigmoid(-tt)
                w = alpha * exp((sc.d[r] - st.d0[p]) / sc.gamma) / total[p]
                ga = g_alpha[q] if g_alpha != NULL else 0.0
                g = ga * (1.0 - amap[p])
                for c in range(dim):
                    g = g + g_feat[q * dim + c] * (sc.feat[r * dim + c] - fbuf[p * dim + c])
                    row[4 + c] += w * g_feat[q * dim + c]
                dt = w * one_minus * g
                row[2] += sc.sharp * dt
                if dist > 0:
                    row[0] += sc.sharp * dt * dx / dist
                    row[1] += sc.sharp * dt * dy / dist
                row[3] += w * g / sc.gamma


def bin_spheres(double[::1] u, double[::1] v, double[::1] cover, int width, int height, int tile):
    """Pixel bounding boxes and per-tile sphere lists (CSR, input order kept)."""
    cdef Py_ssize_t n = u.shape[0], r
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ntiles = tiles_x * tiles_y
    cdef cnp.ndarray[int, ndim=1] i0 = np.empty(n, dtype=np.intc)
    cdef cnp.ndarray[int, ndim=1] i1 = np.empty(n, dtype=np.intc)
    cdef cnp.ndarray[int, ndim=1] j0 = np.empty(n, dtype=np.intc)
    cdef cnp.ndarray[int, ndim=1] j1 = np.empty(n, dtype=np.intc)
    cdef cnp.ndarray[long long, ndim=1] start = np.zeros(ntiles + 1, dtype=np.longlong)
    cdef double a, b
    cdef int tx, ty
    cdef long long total = 0
    for r in range(n):
        a = ceil(u[r] - cover[r] - 0.5)
        b = floor(u[r] + cover[r] - 0.5)
        i0[r] = <int> (a if a > 0 else 0) if a < width else width
        i1[r] = <int> (b if b < width - 1 else width - 1) if b >= 0 else -1
        a = ceil(v[r] - cover[r] - 0.5)
        b = floor(v[r] + cover[r] - 0.5)
        j0[r] = <int> (a if a > 0 else 0) if a < height else height
        j1[r] = <int> (b if b < height - 1 else height - 1) if b >= 0 else -1
        if i0[r] > i1[r] or j0[r] > j1[r]:
            continue
        for ty in range(j0[r] // tile, j1[r] // tile + 1):
            for tx in range(i0[r] // tile, i1[r] // tile + 1):
                start[ty * tiles_x + tx + 1] += 1
    for tx in range(ntiles):
        start[tx + 1] += start[tx]
    total = start[ntiles]
    cdef cnp.ndarray[long long, ndim=1] items = np.empty(total, dtype=np.longlong)
    cdef cnp.ndarray[long long, ndim=1] fill = start[:ntiles].copy()
    for r in range(n):
        if i0[r] > i1[r] or j0[r] > j1[r]:
            continue
        for ty in range(j0[r] // tile, j1[r] // tile + 1):
            for tx in range(i0[r] // tile, i1[r] // tile + 1):
                items[fill[ty * tiles_x + tx]] = r
                fill[ty * tiles_x + tx] += 1
    return i0, i1, j0, j1, start, items, tiles_x, tiles_y


cdef Scene _make_scene(double[::1] u, double[::1] v, double[::1] rho, double[::1] cover,
                       double[::1] d, double[::1] z, double[:, ::1] feat, long long[::1] idx,
                       int[::1] i0, int[::1] i1, int[::1] j0, int[::1] j1,
                       long long[::1] start, long long[::1] items, double[::1] bg,
                       int width, int height, int tile, int tiles_x,
                       double gamma, double sharp, double eps, int kmax):
    cdef Scene sc
    sc.n = u.shape[0]
    sc.dim = feat.shape[1]
    sc.u = &u[0]
    sc.v = &v[0]
    sc.rho = &rho[0]
    sc.cover = &cover[0]
    sc.d = &d[0]
    sc.z = &z[0]
    sc.feat = &feat[0, 0]
    sc.idx = &idx[0]
    sc.i0 = &i0[0]
    sc.i1 = &i1[0]
    sc.j0 = &j0[0]
    sc.j1 = &j1[0]
    sc.tile_start = &start[0]
    sc.tile_items = &items[0] if items.shape[0] > 0 else NULL
    sc.bg = &bg[0]
    sc.width = width
    sc.height = height
    sc.tile = tile
    sc.tiles_x = tiles_x
    sc.gamma = gamma
    sc.sharp = sharp
    sc.eps = eps
    sc.kmax = kmax
    return sc


def forward(double[::1] u, double[::1] v, double[::1] rho, double[::1] cover,
            double[::1] d, double[::1] z, double[:, ::1] feat, long long[::1] idx,
            double[::1] bg, int width, int height, double gamma, double sharp, double eps,
            int kmax, int tile, int nthreads):
    cdef int dim = feat.shape[1]
    i0, i1, j0, j1, start, items, tiles_x, tiles_y = bin_spheres(u, v, cover, width, height, tile)
    cdef Scene sc = _make_scene(u, v, rho, cover, d, z, feat, idx, i0, i1, j0, j1, start, items,
                                bg, width, height, tile, tiles_x, gamma, sharp, eps, kmax)
    cdef int ntiles = tiles_x * tiles_y
    feat_out = np.empty((height, width, dim), dtype=np.float64)
    alpha = np.empty((height, width), dtype=np.float64)
    depth = np.empty((height, width), dtype=np.float64)
    winner = np.empty((height, width), dtype=np.longlong)
    margin = np.empty((height, width), dtype=np.float64)
    count = np.empty((height, width), dtype=np.intc)
    key = np.empty((height, width), dtype=np.uint64)
    cdef double[:, :, ::1] f_mv = feat_out
    cdef double[:, ::1] a_mv = alpha
    cdef double[:, ::1] d_mv = depth
    cdef long long[:, ::1] w_mv = winner
    cdef double[:, ::1] m_mv = margin
    cdef int[:, ::1] c_mv = count
    cdef u64[:, ::1] k_mv = key
    cdef int t, tid
    cdef int npix = tile * tile
    cdef double[:, ::1] dws = np.empty((nthreads, _dws_size(npix, dim)), dtype=np.float64)
    cdef int[:, ::1] iws = np.empty((nthreads, npix), dtype=np.intc)
    cdef long long[:, ::1] lws = np.empty((nthreads, npix), dtype=np.longlong)
    cdef u64[:, ::1] kws = np.empty((nthreads, npix), dtype=np.uint64)
    for t in prange(ntiles, nogil=True, num_threads=nthreads, schedule="static", chunksize=1):
        tid = threadid()
        _forward_tile(&sc, t, &dws[tid, 0], &iws[tid, 0], &lws[tid, 0], &kws[tid, 0],
                      &f_mv[0, 0, 0], &a_mv[0, 0], &d_mv[0, 0],
                      &w_mv[0, 0], &m_mv[0, 0], &c_mv[0, 0], &k_mv[0, 0])
    return feat_out, alpha, depth, winner, margin, count, key


def backward(double[::1] u, double[::1] v, double[::1] rho, double[::1] cover,
             double[::1] d, double[::1] z, double[:, ::1] feat, long long[::1] idx,
             double[::1] bg, int width, int height, double gamma, double sharp, double eps,
             int kmax, int tile, int nthreads, double[:, :, ::1] g_feat, g_alpha_arr):
    """Return per-thread partial gradient buffers ``(nthreads, n, 4 + dim)``."""
    cdef int dim = feat.shape[1]
    cdef Py_ssize_t n = u.shape[0]
    i0, i1, j0, j1, start, items, tiles_x, tiles_y = bin_spheres(u, v, cover, width, height, tile)
    cdef Scene sc = _make_scene(u, v, rho, cover, d, z, feat, idx, i0, i1, j0, j1, start, items,
                                bg, width, height, tile, tiles_x, gamma, sharp, eps, kmax)
    cdef int ntiles = tiles_x * tiles_y
    gbuf = np.zeros((nthreads, n, 4 + dim), dtype=np.float64)
    cdef double[:, :, ::1] g_mv = gbuf
    cdef double[:, ::1] ga_mv
    cdef const double* ga_ptr = NULL
    if g_alpha_arr is not None:
        ga_mv = g_alpha_arr
        ga_ptr = &ga_mv[0, 0]
    cdef int t, tid
    cdef int npix = tile * tile
    cdef double[:, ::1] dws = np.empty((nthreads, _dws_size(npix, dim)), dtype=np.float64)
    cdef int[:, ::1] iws = np.empty((nthreads, npix), dtype=np.intc)
    cdef long long[:, ::1] lws = np.empty((nthreads, npix), dtype=np.longlong)
    cdef u64[:, ::1] kws = np.empty((nthreads, npix), dtype=np.uint64)
    for t in prange(ntiles, nogil=True, num_threads=nthreads, schedule="static", chunksize=1):
        tid = threadid()
        _backward_tile(&sc, t, &dws[tid, 0], &iws[tid, 0], &lws[tid, 0], &kws[tid, 0],
                       &g_feat[0, 0, 0], ga_ptr, &g_mv[tid, 0, 0])
    return gbuf
