"""NumPy implementations of the hot kernels.

This is the fallback backend, selected when the compiled extension is not
available (or forced via ``CANET_KERNELS=ref``).  Contracts are shared with
``canet._kernels._fast``: inputs are C-contiguous float32/float64 arrays
(uint8 for the distance transform), outputs are freshly allocated.  All
shape validation happens in the calling layer.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k, stride, pad):
    b, cin = x.shape[0], x.shape[1]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * k * k)
    return cols, ho, wo


def conv2d_fwd(x, w, stride, pad, return_cols=False):
    """Cross-correlate x[B,Ci,H,W] with w[Co,Ci,k,k] via im2col + matmul.

    With return_cols the (B*H'*W', Ci*k*k) patch matrix is handed back so
    the weight gradient can reuse it instead of rebuilding it.
    """
    b = x.shape[0]
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(cout, cin * k * k).T
    y = np.ascontiguousarray(y.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    if return_cols:
        return y, cols
    return y


def conv2d_bwd_input(gy, w, stride, pad, height, width):
    """Gradient of conv2d_fwd w.r.t. its input: one matmul, then k*k tap scatters."""
    b, cout, ho, wo = gy.shape
    cin, k = w.shape[1], w.shape[2]
    g = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    taps = (g @ w.reshape(cout, cin * k * k)).reshape(b, ho, wo, cin, k, k)
    gx = np.zeros((b, cin, height + 2 * pad, width + 2 * pad), dtype=gy.dtype)
    for kh in range(k):
        for kw in range(k):
            gx[:, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += (
                taps[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
            )
    if pad:
        gx = gx[:, :, pad:pad + height, pad:pad + width]
    return np.ascontiguousarray(gx)


def conv2d_bwd_weight_cols(gy, cols, cin, k):
    """Weight gradient from the forward pass's saved patch matrix."""
    b, cout, ho, wo = gy.shape
    g = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    return np.ascontiguousarray((g.T @ cols).reshape(cout, cin, k, k))


def conv2d_bwd_weight(gy, x, stride, pad, k):
    """Gradient of conv2d_fwd w.r.t. the kernel."""
    cin = x.shape[1]
    cols, _, _ = _im2col(x, k, stride, pad)
    return conv2d_bwd_weight_cols(gy, cols, cin, k)


def maxpool_fwd(x, window, stride):
    """Window-max over x[B,C,H,W].

    Returns (values, idx) where idx holds, per output cell, the flat index
    of the winning input pixel within its H*W plane.  Ties go to the first
    candidate in row-major window order (argmax's first-occurrence rule).
    """
    b, c, _, wd = x.shape
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, window * window)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    idx = (rows * wd + cols).astype(np.int64)
    return np.ascontiguousarray(y), np.ascontiguousarray(idx)


def maxpool_bwd(gy, idx, height, width):
    """Scatter gy back to the argmax positions recorded by maxpool_fwd."""
    b, c = gy.shape[:2]
    gx = np.zeros((b, c, height * width), dtype=gy.dtype)
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(gx, (bi, ci, idx.reshape(b, c, -1)), gy.reshape(b, c, -1))
    return gx.reshape(b, c, height, width)


def _edt_1d_sq(f):
    """Exact 1-D squared distance transform (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n, dtype=np.int64)
    v = np.empty(n, dtype=np.intp)
    z = np.empty(n + 1, dtype=np.float64)
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edt_sq(mask):
    """Exact squared Euclidean distance to the nearest zero pixel of mask[H,W].

    Column scans produce the per-column nearest-zero distance; a parabola
    envelope pass along each row turns that into the exact 2-D result.
    Columns without any zero get the sentinel distance h+w, whose square
    dominates every achievable value.
    """
    h, w = mask.shape
    big = h + w
    fg = mask.astype(bool)
    lin = np.empty((h, w), dtype=np.int64)
    run = np.full(w, big, dtype=np.int64)
    for i in range(h):
        run = np.where(fg[i], np.minimum(run + 1, big), 0)
        lin[i] = run
    run = np.full(w, big, dtype=np.int64)
    for i in range(h - 1, -1, -1):
        run = np.where(fg[i], np.minimum(run + 1, big), 0)
        np.minimum(lin[i], run, out=lin[i])
    g = lin * lin
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        out[i] = _edt_1d_sq(g[i])
    return out
