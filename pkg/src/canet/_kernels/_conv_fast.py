"""Convolution kernels: compiled patch copy/scatter around BLAS matmuls.

Same contracts as the conv functions in ``_ref``; only the im2col/col2im
data movement runs through the compiled extension.  The matmul itself is
BLAS either way, so values agree with the reference up to the usual
floating-point reassociation of the identical GEMM (in practice bitwise,
since the GEMM call is literally the same).
"""

import numpy as np

from canet._kernels import _fast


def _pad(x, pad):
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return x


def conv2d_fwd(x, w, stride, pad, return_cols=False):
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = _fast.im2col(_pad(x, pad), k, stride, ho, wo)
    y = cols @ w.reshape(cout, cin * k * k).T
    y = np.ascontiguousarray(y.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    if return_cols:
        return y, cols
    return y


def conv2d_bwd_input(gy, w, stride, pad, height, width):
    b, cout, ho, wo = gy.shape
    cin, k = w.shape[1], w.shape[2]
    g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
    taps = g @ w.reshape(cout, cin * k * k)
    gxp = np.zeros((b, cin, height + 2 * pad, width + 2 * pad), dtype=gy.dtype)
    _fast.col2im_add(taps, gxp, k, stride, ho, wo)
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + height, pad:pad + width])
    return gxp


def conv2d_bwd_weight_cols(gy, cols, cin, k):
    b, cout, ho, wo = gy.shape
    g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
    return np.ascontiguousarray((g.T @ cols).reshape(cout, cin, k, k))


def conv2d_bwd_weight(gy, x, stride, pad, k):
    b, cin, h, wd = x.shape
    _, _, ho, wo = gy.shape
    cols = _fast.im2col(_pad(x, pad), k, stride, ho, wo)
    return conv2d_bwd_weight_cols(gy, cols, cin, k)
