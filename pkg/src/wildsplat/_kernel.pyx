# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels. Same contract as ``_kernel_py``.

Pixels are visited tile by tile, row-major inside a tile, and per-Gaussian
gradients are accumulated in that fixed order, so results are bitwise
reproducible.

Inside a tile each pixel row first computes, per Gaussian, the x-interval
where the cutoff ellipse crosses that row (padded by ``ROW_MARGIN`` px);
only pixels inside it reach the exact Mahalanobis test, which alone
decides inclusion. The prefilter therefore never changes a result.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "cython"


cdef double ROW_MARGIN = 1e-6


cdef Py_ssize_t _row_spans(Py_ssize_t k0, Py_ssize_t k1, const cnp.int64_t[::1] tile_ids,
                           const double[:, ::1] means, const double[:, ::1] conics, double py, double cutoff2,
                           cnp.int64_t[::1] row_ids, double[::1] row_lo, double[::1] row_hi) noexcept:
    cdef Py_ssize_t k, g, m = 0
    cdef double dy, q0, q1, q2, b, disc, scale, half, mid
    for k in range(k0, k1):
        g = tile_ids[k]
        q0 = conics[g, 0]
        q1 = conics[g, 1]
        q2 = conics[g, 2]
        dy = py - means[g, 1]
        b = q1 * dy
        # q0·dx² + 2·b·dx + (q2·dy² - c) <= 0
        disc = b * b - q0 * (q2 * dy * dy - cutoff2)
        scale = b * b + q0 * (q2 * dy * dy + cutoff2)
        if disc < -1e-9 * scale:
            continue
        if disc < 0.0:
            disc = 0.0
        half = sqrt(disc) / q0
        mid = means[g, 0] - b / q0
        row_ids[m] = g
        row_lo[m] = mid - half - ROW_MARGIN
        row_hi[m] = mid + half + ROW_MARGIN
        m = m + 1
    return m


def forward(const double[:, ::1] means, const double[:, ::1] conics, const double[::1] alphas,
            const double[:, ::1] colors, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
            Py_ssize_t tile_size, Py_ssize_t height, Py_ssize_t width, double cutoff2, double w_max):
    cdef Py_ssize_t n = means.shape[0]
    image_arr = np.zeros((height, width, 3))
    final_arr = np.ones((height, width))
    visible_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_T = final_arr
    cdef unsigned char[::1] visible = visible_arr
    cdef Py_ssize_t tiles_x = (width + tile_size - 1) // tile_size
    cdef Py_ssize_t ntiles = tile_ptr.shape[0] - 1
    cdef Py_ssize_t t, r, c, r0, r1, c0, c1, k, g, m, maxlen = 1
    for t in range(ntiles):
        if tile_ptr[t + 1] - tile_ptr[t] > maxlen:
            maxlen = tile_ptr[t + 1] - tile_ptr[t]
    row_ids_arr = np.empty(maxlen, dtype=np.int64)
    row_lo_arr = np.empty(maxlen)
    row_hi_arr = np.empty(maxlen)
    cdef cnp.int64_t[::1] row_ids = row_ids_arr
    cdef double[::1] row_lo = row_lo_arr
    cdef double[::1] row_hi = row_hi_arr
    cdef double px, py, dx, dy, m2, G, a, w, T, cr, cg, cb
    for t in range(ntiles):
        if tile_ptr[t + 1] == tile_ptr[t]:
            continue
        r0 = (t // tiles_x) * tile_size
        c0 = (t % tiles_x) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        for r in range(r0, r1):
            py = r + 0.5
            m = _row_spans(tile_ptr[t], tile_ptr[t + 1], tile_ids, means, conics, py, cutoff2,
                           row_ids, row_lo, row_hi)
            for c in range(c0, c1):
                px = c + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for k in range(m):
                    if px < row_lo[k] or px > row_hi[k]:
                        continue
                    g = row_ids[k]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    m2 = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if m2 > cutoff2:
                        continue
                    G = exp(-0.5 * m2)
                    a = alphas[g] * G
                    w = a if a < w_max else w_max
                    cr = cr + colors[g, 0] * w * T
                    cg = cg + colors[g, 1] * w * T
                    cb = cb + colors[g, 2] * w * T
                    T = T * (1.0 - w)
                    visible[g] = 1
                image[r, c, 0] = cr
                image[r, c, 1] = cg
                image[r, c, 2] = cb
                final_T[r, c] = T
    return image_arr, final_arr, visible_arr.astype(bool)


def backward(const double[:, ::1] means, const double[:, ::1] conics, const double[::1] alphas,
             const double[:, ::1] colors, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
             Py_ssize_t tile_size, Py_ssize_t height, Py_ssize_t width, double cutoff2, double w_max,
             const double[:, :, ::1] dL_dimage):
    cdef Py_ssize_t n = means.shape[0]
    d_colors_arr = np.zeros((n, 3))
    d_alphas_arr = np.zeros(n)
    d_means_arr = np.zeros((n, 2))
    d_conics_arr = np.zeros((n, 3))
    cdef double[:, ::1] d_colors = d_colors_arr
    cdef double[::1] d_alphas = d_alphas_arr
    cdef double[:, ::1] d_means = d_means_arr
    cdef double[:, ::1] d_conics = d_conics_arr
    cdef Py_ssize_t tiles_x = (width + tile_size - 1) // tile_size
    cdef Py_ssize_t ntiles = tile_ptr.shape[0] - 1
    cdef Py_ssize_t maxlen = 1, t, r, c, r0, r1, c0, c1, k, g, j, m, nrow
    for t in range(ntiles):
        if tile_ptr[t + 1] - tile_ptr[t] > maxlen:
            maxlen = tile_ptr[t + 1] - tile_ptr[t]
    row_ids_arr = np.empty(maxlen, dtype=np.int64)
    row_lo_arr = np.empty(maxlen)
    row_hi_arr = np.empty(maxlen)
    cdef cnp.int64_t[::1] row_ids = row_ids_arr
    cdef double[::1] row_lo = row_lo_arr
    cdef double[::1] row_hi = row_hi_arr
    # per-pixel contributor stack: id, then w, T, G, dx, dy, live
    buf_i_arr = np.empty(maxlen, dtype=np.int64)
    buf_f_arr = np.empty((maxlen, 6))
    cdef cnp.int64_t[::1] buf_i = buf_i_arr
    cdef double[:, ::1] buf = buf_f_arr
    cdef double px, py, dx, dy, m2, G, a, w, T, gr, gg, gb, sr, sg, sb, dLdw, wT, gpow, ga
    for t in range(ntiles):
        if tile_ptr[t + 1] == tile_ptr[t]:
            continue
        r0 = (t // tiles_x) * tile_size
        c0 = (t % tiles_x) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        for r in range(r0, r1):
            py = r + 0.5
            nrow = _row_spans(tile_ptr[t], tile_ptr[t + 1], tile_ids, means, conics, py, cutoff2,
                              row_ids, row_lo, row_hi)
            for c in range(c0, c1):
                px = c + 0.5
                gr = dL_dimage[r, c, 0]
                gg = dL_dimage[r, c, 1]
                gb = dL_dimage[r, c, 2]
                T = 1.0
                m = 0
                for k in range(nrow):
                    if px < row_lo[k] or px > row_hi[k]:
                        continue
                    g = row_ids[k]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    m2 = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if m2 > cutoff2:
                        continue
                    G = exp(-0.5 * m2)
                    a = alphas[g] * G
                    buf_i[m] = g
                    if a < w_max:
                        w = a
                        buf[m, 5] = 1.0
                    else:
                        w = w_max
                        buf[m, 5] = 0.0
                    buf[m, 0] = w
                    buf[m, 1] = T
                    buf[m, 2] = G
                    buf[m, 3] = dx
                    buf[m, 4] = dy
                    T = T * (1.0 - w)
                    m = m + 1
                sr = 0.0
                sg = 0.0
                sb = 0.0
                for j in range(m - 1, -1, -1):
                    g = buf_i[j]
                    w = buf[j, 0]
                    T = buf[j, 1]
                    wT = w * T
                    dLdw = (gr * (T * colors[g, 0] - sr / (1.0 - w))
                            + gg * (T * colors[g, 1] - sg / (1.0 - w))
                            + gb * (T * colors[g, 2] - sb / (1.0 - w)))
                    d_colors[g, 0] += wT * gr
                    d_colors[g, 1] += wT * gg
                    d_colors[g, 2] += wT * gb
                    sr = sr + colors[g, 0] * wT
                    sg = sg + colors[g, 1] * wT
                    sb = sb + colors[g, 2] * wT
                    if buf[j, 5] == 0.0:
                        continue
                    G = buf[j, 2]
                    dx = buf[j, 3]
                    dy = buf[j, 4]
                    ga = dLdw * G
                    d_alphas[g] += ga
                    gpow = ga * alphas[g]
                    d_means[g, 0] += gpow * (conics[g, 0] * dx + conics[g, 1] * dy)
                    d_means[g, 1] += gpow * (conics[g, 1] * dx + conics[g, 2] * dy)
                    d_conics[g, 0] += -0.5 * gpow * dx * dx
                    d_conics[g, 1] += -gpow * dx * dy
                    d_conics[g, 2] += -0.5 * gpow * dy * dy
    return d_colors_arr, d_alphas_arr, d_means_arr, d_conics_arr
