# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled versions of the scan-heavy kernels.

Same contracts as ``canet._kernels._ref``: maxpool with first-in-scan-order
tie breaking and plane-flat argmax indices, and the exact squared Euclidean
distance transform (column scans + row parabola envelopes, all integer
except the envelope breakpoints).  Convolution is not duplicated here; the
BLAS-backed route in ``_ref`` is already the fast path for it.
"""

import numpy as np

from libc.math cimport INFINITY
from libc.stdint cimport int64_t, uint8_t

ctypedef fused floating:
    float
    double


def im2col(const floating[:, :, :, ::1] xp, int k, int stride,
           Py_ssize_t ho, Py_ssize_t wo):
    """Patch matrix of a padded input: rows are output positions, columns
    are (channel, kh, kw) in row-major order, matching the kernel reshape."""
    cdef Py_ssize_t b = xp.shape[0], ci = xp.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_np = np.empty((b * ho * wo, ci * k * k), dtype=dtype)
    cdef floating[:, ::1] cols = cols_np
    cdef Py_ssize_t bi, c, oh, ow, kh, kw, row, col0, r0, c0
    with nogil:
        for bi in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    row = (bi * ho + oh) * wo + ow
                    c0 = ow * stride
                    for c in range(ci):
                        for kh in range(k):
                            r0 = oh * stride + kh
                            col0 = (c * k + kh) * k
                            for kw in range(k):
                                cols[row, col0 + kw] = xp[bi, c, r0, c0 + kw]
    return cols_np


def col2im_add(const floating[:, ::1] taps, floating[:, :, :, ::1] gxp,
               int k, int stride, Py_ssize_t ho, Py_ssize_t wo):
    """Scatter-add a patch matrix back onto the padded input gradient."""
    cdef Py_ssize_t b = gxp.shape[0], ci = gxp.shape[1]
    cdef Py_ssize_t bi, c, oh, ow, kh, kw, row, col0, r0, c0
    with nogil:
        for bi in range(b):
            for oh in range(ho):
                for ow in range(wo):
                    row = (bi * ho + oh) * wo + ow
                    c0 = ow * stride
                    for c in range(ci):
                        for kh in range(k):
                            r0 = oh * stride + kh
                            col0 = (c * k + kh) * k
                            for kw in range(k):
                                gxp[bi, c, r0, c0 + kw] += taps[row, col0 + kw]


def maxpool_fwd(const floating[:, :, :, ::1] x, int window, int stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - window) // stride + 1
    cdef Py_ssize_t wo = (w - window) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_np = np.empty((b, c, ho, wo), dtype=dtype)
    idx_np = np.empty((b, c, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_np
    cdef int64_t[:, :, :, ::1] idx = idx_np
    cdef Py_ssize_t bi, ci, oh, ow, di, dj, r0, c0
    cdef floating best
    cdef int64_t besti
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oh in range(ho):
                    r0 = oh * stride
                    for ow in range(wo):
                        c0 = ow * stride
                        best = x[bi, ci, r0, c0]
                        besti = r0 * w + c0
                        for di in range(window):
                            for dj in range(window):
                                if x[bi, ci, r0 + di, c0 + dj] > best:
                                    best = x[bi, ci, r0 + di, c0 + dj]
                                    besti = (r0 + di) * w + (c0 + dj)
                        y[bi, ci, oh, ow] = best
                        idx[bi, ci, oh, ow] = besti
    return y_np, idx_np


def maxpool_bwd(const floating[:, :, :, ::1] gy, const int64_t[:, :, :, ::1] idx,
                int height, int width):
    cdef Py_ssize_t b = gy.shape[0], c = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_np = np.zeros((b, c, height * width), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_np
    cdef Py_ssize_t bi, ci, oh, ow
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        gx[bi, ci, idx[bi, ci, oh, ow]] += gy[bi, ci, oh, ow]
    return gx_np.reshape(b, c, height, width)


def edt_sq(const uint8_t[:, ::1] mask):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef int64_t big = h + w
    g_np = np.empty((h, w), dtype=np.int64)
    out_np = np.empty((h, w), dtype=np.int64)
    cdef int64_t[:, ::1] g = g_np
    cdef int64_t[:, ::1] out = out_np
    run_np = np.empty(w, dtype=np.int64)
    v_np = np.empty(max(w, 1), dtype=np.int64)
    z_np = np.empty(w + 1, dtype=np.float64)
    cdef int64_t[::1] run = run_np
    cdef int64_t[::1] v = v_np
    cdef double[::1] z = z_np
    cdef Py_ssize_t i, j, q, k
    cdef double s
    cdef int64_t d
    with nogil:
        # per-column distance to the nearest zero, clamped at big
        for j in range(w):
            run[j] = big
        for i in range(h):
            for j in range(w):
                if mask[i, j]:
                    if run[j] < big:
                        run[j] += 1
                else:
                    run[j] = 0
                g[i, j] = run[j]
        for j in range(w):
            run[j] = big
        for i in range(h - 1, -1, -1):
            for j in range(w):
                if mask[i, j]:
                    if run[j] < big:
                        run[j] += 1
                else:
                    run[j] = 0
                if run[j] < g[i, j]:
                    g[i, j] = run[j]
        for i in range(h):
            for j in range(w):
                g[i, j] = g[i, j] * g[i, j]
        # lower envelope of parabolas along each row
        for i in range(h):
            k = 0
            v[0] = 0
            z[0] = -INFINITY
            z[1] = INFINITY
            for q in range(1, w):
                s = ((g[i, q] + q * q) - (g[i, v[k]] + v[k] * v[k])) \
                    / (2.0 * (q - v[k]))
                while s <= z[k]:
                    k -= 1
                    s = ((g[i, q] + q * q) - (g[i, v[k]] + v[k] * v[k])) \
                        / (2.0 * (q - v[k]))
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = INFINITY
            k = 0
            for q in range(w):
                while z[k + 1] < q:
                    k += 1
                d = q - v[k]
                out[i, q] = d * d + g[i, v[k]]
    return out_np
