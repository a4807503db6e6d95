# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rasterization kernels: tiled forward compositing, fused loss
accumulation, and the backward pass to projected means/covariances.

Semantics are identical to the pure-numpy module `_rasterize_py`; per pixel
the contributor set, order and arithmetic agree, so outputs match to float
rounding. Gaussians arrive depth-sorted (nearest first) with per-tile index
lists in CSR form. The hot loops release the GIL so callers may process
cameras on worker threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF TILE = 16

cdef double Q_CUTOFF = 9.0
cdef double ALPHA_MAX = 0.99
cdef double T_STOP = 1e-4

BACKEND = "cython"


def forward_image(
    const double[:, ::1] mean2d,
    const double[:, ::1] conic,
    const double[::1] opacity,
    const double[:, ::1] color,
    const int[:, ::1] rects,
    const int[::1] tile_start,
    const int[::1] tile_items,
    int tiles_x,
    int tiles_y,
    int width,
    int height,
    const double[::1] background,
):
    image_arr = np.empty((height, width, 3), dtype=np.float64)
    image_arr[:, :] = np.asarray(background)
    trans_arr = np.ones((height, width), dtype=np.float64)
    weight_arr = np.zeros((height, width), dtype=np.float64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[:, ::1] weight = weight_arr

    cdef int tx, ty, tid, k, j, px, py, y_end, x_end
    cdef int s0, s1
    cdef double t, cr, cg, cb, wsum, dx, dy, q, a, w

    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                tid = ty * tiles_x + tx
                s0 = tile_start[tid]
                s1 = tile_start[tid + 1]
                if s0 == s1:
                    continue
                y_end = (ty + 1) * TILE
                if y_end > height:
                    y_end = height
                x_end = (tx + 1) * TILE
                if x_end > width:
                    x_end = width
                for py in range(ty * TILE, y_end):
                    for px in range(tx * TILE, x_end):
                        t = 1.0
                        cr = 0.0
                        cg = 0.0
                        cb = 0.0
                        wsum = 0.0
                        for k in range(s0, s1):
                            if t < T_STOP:
                                break
                            j = tile_items[k]
                            dx = (px + 0.5) - mean2d[j, 0]
                            dy = (py + 0.5) - mean2d[j, 1]
                            q = conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy \
                                + conic[j, 2] * dy * dy
                            if q > Q_CUTOFF:
                                continue
                            a = opacity[j] * exp(-0.5 * q)
                            if a > ALPHA_MAX:
                                a = ALPHA_MAX
                            w = a * t
                            cr += color[j, 0] * w
                            cg += color[j, 1] * w
                            cb += color[j, 2] * w
                            wsum += w
                            t = t * (1.0 - a)
                        image[py, px, 0] = cr + t * background[0]
                        image[py, px, 1] = cg + t * background[1]
                        image[py, px, 2] = cb + t * background[2]
                        trans[py, px] = t
                        weight[py, px] = wsum
    return image_arr, trans_arr, weight_arr


def loss_forward(
    const double[:, ::1] mean2d,
    const double[:, ::1] conic,
    const double[::1] opacity,
    const double[:, ::1] color,
    const int[:, ::1] rects,
    const int[::1] tile_start,
    const int[::1] tile_items,
    int tiles_x,
    int tiles_y,
    int width,
    int height,
    const double[::1] background,
    const double[:, :, ::1] observed,
    const cnp.uint8_t[:, ::1] mask,
):
    cdef int tx, ty, tid, k, j, px, py, y_end, x_end
    cdef int s0, s1
    cdef double t, cr, cg, cb, dx, dy, q, a, w, acc, dr, db
    acc = 0.0

    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                tid = ty * tiles_x + tx
                s0 = tile_start[tid]
                s1 = tile_start[tid + 1]
                if s0 == s1:
                    continue
                y_end = (ty + 1) * TILE
                if y_end > height:
                    y_end = height
                x_end = (tx + 1) * TILE
                if x_end > width:
                    x_end = width
                for py in range(ty * TILE, y_end):
                    for px in range(tx * TILE, x_end):
                        if mask[py, px] == 0:
                            continue
                        t = 1.0
                        cr = 0.0
                        cg = 0.0
                        cb = 0.0
                        for k in range(s0, s1):
                            if t < T_STOP:
                                break
                            j = tile_items[k]
                            dx = (px + 0.5) - mean2d[j, 0]
                            dy = (py + 0.5) - mean2d[j, 1]
                            q = conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy \
                                + conic[j, 2] * dy * dy
                            if q > Q_CUTOFF:
                                continue
                            a = opacity[j] * exp(-0.5 * q)
                            if a > ALPHA_MAX:
                                a = ALPHA_MAX
                            w = a * t
                            cr += color[j, 0] * w
                            cg += color[j, 1] * w
                            cb += color[j, 2] * w
                            t = t * (1.0 - a)
                        dr = cr + t * background[0] - observed[py, px, 0]
                        db = background[0] - observed[py, px, 0]
                        acc += dr * dr - db * db
                        dr = cg + t * background[1] - observed[py, px, 1]
                        db = background[1] - observed[py, px, 1]
                        acc += dr * dr - db * db
                        dr = cb + t * background[2] - observed[py, px, 2]
                        db = background[2] - observed[py, px, 2]
                        acc += dr * dr - db * db
    return acc


def loss_backward(
    const double[:, ::1] mean2d,
    const double[:, ::1] conic,
    const double[::1] opacity,
    const double[:, ::1] color,
    const int[:, ::1] rects,
    const int[::1] tile_start,
    const int[::1] tile_items,
    int tiles_x,
    int tiles_y,
    int width,
    int height,
    const double[::1] background,
    const double[:, :, ::1] observed,
    const cnp.uint8_t[:, ::1] mask,
    double inv_loss,
):
    cdef Py_ssize_t m = mean2d.shape[0]
    g_mean_arr = np.zeros((m, 2), dtype=np.float64)
    g_cov_arr = np.zeros((m, 3), dtype=np.float64)
    cdef double[:, ::1] g_mean = g_mean_arr
    cdef double[:, ::1] g_cov = g_cov_arr

    cdef int max_len = 0
    cdef int tid
    for tid in range(tiles_x * tiles_y):
        if tile_start[tid + 1] - tile_start[tid] > max_len:
            max_len = tile_start[tid + 1] - tile_start[tid]
    if max_len == 0:
        return g_mean_arr, g_cov_arr

    buf_idx_arr = np.empty(max_len, dtype=np.int32)
    buf_alpha_arr = np.empty(max_len, dtype=np.float64)
    buf_t_arr = np.empty(max_len, dtype=np.float64)
    buf_clamp_arr = np.empty(max_len, dtype=np.int32)
    cdef int[::1] buf_idx = buf_idx_arr
    cdef double[::1] buf_alpha = buf_alpha_arr
    cdef double[::1] buf_t = buf_t_arr
    cdef int[::1] buf_clamp = buf_clamp_arr

    cdef int tx, ty, k, j, px, py, y_end, x_end, n, i, clamp
    cdef int s0, s1
    cdef double t, dx, dy, q, a, w, raw
    cdef double r0, r1, r2, s_0, s_1, s_2, one_m, dl_da, common, w0, w1, tj

    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                tid = ty * tiles_x + tx
                s0 = tile_start[tid]
                s1 = tile_start[tid + 1]
                if s0 == s1:
                    continue
                y_end = (ty + 1) * TILE
                if y_end > height:
                    y_end = height
                x_end = (tx + 1) * TILE
                if x_end > width:
                    x_end = width
                for py in range(ty * TILE, y_end):
                    for px in range(tx * TILE, x_end):
                        if mask[py, px] == 0:
                            continue
                        # forward replay, recording contributors
                        t = 1.0
                        r0 = 0.0
                        r1 = 0.0
                        r2 = 0.0
                        n = 0
                        for k in range(s0, s1):
                            if t < T_STOP:
                                break
                            j = tile_items[k]
                            dx = (px + 0.5) - mean2d[j, 0]
                            dy = (py + 0.5) - mean2d[j, 1]
                            q = conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy \
                                + conic[j, 2] * dy * dy
                            if q > Q_CUTOFF:
                                continue
                            raw = opacity[j] * exp(-0.5 * q)
                            if raw > ALPHA_MAX:
                                a = ALPHA_MAX
                                clamp = 1
                            else:
                                a = raw
                                clamp = 0
                            buf_idx[n] = j
                            buf_alpha[n] = a
                            buf_t[n] = t
                            buf_clamp[n] = clamp
                            n += 1
                            w = a * t
                            r0 += color[j, 0] * w
                            r1 += color[j, 1] * w
                            r2 += color[j, 2] * w
                            t = t * (1.0 - a)
                        if n == 0:
                            continue
                        # dL/d(pixel) = residual * inv_loss
                        r0 = (r0 + t * background[0] - observed[py, px, 0]) * inv_loss
                        r1 = (r1 + t * background[1] - observed[py, px, 1]) * inv_loss
                        r2 = (r2 + t * background[2] - observed[py, px, 2]) * inv_loss
                        # suffix = background term, then walk contributors back
                        s_0 = t * background[0]
                        s_1 = t * background[1]
                        s_2 = t * background[2]
                        for i in range(n - 1, -1, -1):
                            j = buf_idx[i]
                            a = buf_alpha[i]
                            tj = buf_t[i]
                            one_m = 1.0 - a
                            dl_da = r0 * (color[j, 0] * tj - s_0 / one_m) \
                                + r1 * (color[j, 1] * tj - s_1 / one_m) \
                                + r2 * (color[j, 2] * tj - s_2 / one_m)
                            if buf_clamp[i] == 0:
                                common = dl_da * a
                                dx = (px + 0.5) - mean2d[j, 0]
                                dy = (py + 0.5) - mean2d[j, 1]
                                w0 = conic[j, 0] * dx + conic[j, 1] * dy
                                w1 = conic[j, 1] * dx + conic[j, 2] * dy
                                g_mean[j, 0] += common * w0
                                g_mean[j, 1] += common * w1
                                g_cov[j, 0] += 0.5 * common * w0 * w0
                                g_cov[j, 1] += common * w0 * w1
                                g_cov[j, 2] += 0.5 * common * w1 * w1
                            w = a * tj
                            s_0 += color[j, 0] * w
                            s_1 += color[j, 1] * w
                            s_2 += color[j, 2] * w
    return g_mean_arr, g_cov_arr
