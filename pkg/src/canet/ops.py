"""Network operations over :class:`canet.tensor.Tensor`.

Each function validates shapes up front (error messages name the offending
axis), computes the forward value through the kernel layer, and registers
a closure producing exact cotangents for every differentiable operand.
"""

from dataclasses import dataclass

import numpy as np

from canet import _kernels
from canet.tensor import Tensor, grad_enabled

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _c(a):
    return np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,k,k]."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d, got {x.ndim}-d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-d, got {weight.ndim}-d")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {k}x{k2}")
    if wcin != cin:
        raise ValueError(
            f"conv2d channel mismatch on axis 1: input has {cin}, "
            f"weight expects {wcin}"
        )
    if k > h + 2 * padding:
        raise ValueError(
            f"conv2d kernel {k} exceeds padded height (axis 2) {h + 2 * padding}"
        )
    if k > w + 2 * padding:
        raise ValueError(
            f"conv2d kernel {k} exceeds padded width (axis 3) {w + 2 * padding}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(
            f"conv2d bias shape {tuple(bias.shape)} does not match "
            f"output channels (axis 1) {cout}"
        )

    xd, wd = _c(x.data), _c(weight.data)
    # keep the forward patch matrix around iff the weight gradient will need it
    need_cols = grad_enabled() and weight.requires_grad
    if need_cols:
        y, cols = _kernels.conv2d_fwd(xd, wd, stride, padding, return_cols=True)
    else:
        y, cols = _kernels.conv2d_fwd(xd, wd, stride, padding), None
    if bias is not None:
        y += bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gy):
        gy = _c(gy)
        gx = _kernels.conv2d_bwd_input(gy, wd, stride, padding, h, w) \
            if x.requires_grad else None
        gw = _kernels.conv2d_bwd_weight_cols(gy, cols, cin, k) \
            if need_cols else None
        if bias is None:
            return gx, gw
        gb = gy.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._make(y, parents, bwd)


def conv_transpose2d(x, weight, stride):
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    weight is laid out (Cin, Cout, k, k); with k = stride the op doubles
    (or k-folds) the spatial resolution with no overlap.  Output size is
    (H-1)*stride + k, no padding.
    """
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d input must be 4-d, got {x.ndim}-d")
    if weight.ndim != 4:
        raise ValueError(
            f"conv_transpose2d weight must be 4-d, got {weight.ndim}-d"
        )
    b, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv_transpose2d kernel must be square, got {k}x{k2}")
    if wcin != cin:
        raise ValueError(
            f"conv_transpose2d channel mismatch on axis 1: input has {cin}, "
            f"weight expects {wcin}"
        )
    ho = (h - 1) * stride + k
    wo = (w - 1) * stride + k

    xd, wd = _c(x.data), _c(weight.data)
    y = _kernels.conv2d_bwd_input(xd, wd, stride, 0, ho, wo)

    def bwd(gy):
        gy = _c(gy)
        gx = _kernels.conv2d_fwd(gy, wd, stride, 0) if x.requires_grad else None
        gw = _kernels.conv2d_bwd_weight(xd, gy, stride, 0, k) \
            if weight.requires_grad else None
        return gx, gw

    return Tensor._make(y, (x, weight), bwd)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x, window=2, stride=2):
    if x.ndim != 4:
        raise ValueError(f"maxpool2d input must be 4-d, got {x.ndim}-d")
    b, c, h, w = x.shape
    if h % stride:
        raise ValueError(f"maxpool2d height (axis 2) {h} not divisible by stride {stride}")
    if w % stride:
        raise ValueError(f"maxpool2d width (axis 3) {w} not divisible by stride {stride}")
    if window > h or window > w:
        raise ValueError(f"maxpool2d window {window} exceeds input {h}x{w}")
    if (h - window) % stride or (w - window) % stride:
        raise ValueError(
            f"maxpool2d window {window}/stride {stride} does not tile {h}x{w}"
        )

    y, idx = _kernels.maxpool_fwd(_c(x.data), window, stride)

    def bwd(gy):
        return (_kernels.maxpool_bwd(_c(gy), idx, h, w),)

    return Tensor._make(y, (x,), bwd)


def global_avg_pool(x):
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool input must be 4-d, got {x.ndim}-d")
    b, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(gy):
        return (np.broadcast_to(gy / (h * w), x.data.shape),)

    return Tensor._make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0

    def bwd(gy):
        return (np.where(mask, gy, 0.0),)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x):
    # exp of the negative magnitude only, so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(gy):
        return (gy * y * (1.0 - y),)

    return Tensor._make(y, (x,), bwd)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax_lastdim(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(gy):
        dot = (gy * y).sum(axis=-1, keepdims=True)
        return (y * (gy - dot),)

    return Tensor._make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and layout


def batched_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("batched_matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"batched_matmul inner mismatch: a axis {a.ndim - 1} is "
            f"{a.shape[-1]}, b axis {b.ndim - 2} is {b.shape[-2]}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(
            f"batched_matmul batch extents differ: {a.shape[:-2]} vs {b.shape[:-2]}"
        )
    ad, bd = a.data, b.data
    y = np.matmul(ad, bd)

    def bwd(gy):
        ga = np.matmul(gy, bd.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(ad.swapaxes(-1, -2), gy) if b.requires_grad else None
        return ga, gb

    return Tensor._make(y, (a, b), bwd)


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels operands must be 4-d")
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"concat_channels batch (axis 0) mismatch: {a.shape[0]} vs {b.shape[0]}"
        )
    if a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels spatial (axes 2,3) mismatch: "
            f"{a.shape[2:]} vs {b.shape[2:]}"
        )
    c1 = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def bwd(gy):
        return gy[:, :c1], gy[:, c1:]

    return Tensor._make(y, (a, b), bwd)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch_norm's eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def for_channels(cls, channels):
        # float64 regardless of the working dtype: early-training variance
        # spikes overflow float32 and an inf would poison the average for
        # the rest of the run
        return cls(mean=np.zeros(channels, dtype=np.float64),
                   var=np.ones(channels, dtype=np.float64))


def batch_norm(x, scale, shift, state, mode):
    """Channelwise normalization.

    Train mode standardizes by batch statistics (biased variance, epsilon
    1e-5) and folds them into the running stats; eval mode uses the running
    stats.  Scale and shift are per-channel affine parameters.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm input must be 4-d, got {x.ndim}-d")
    b, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"batch_norm scale/shift must match channels (axis 1) {c}, got "
            f"{tuple(scale.shape)} and {tuple(shift.shape)}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    xd = x.data
    sc = scale.data.reshape(1, c, 1, 1)
    sh = shift.data.reshape(1, c, 1, 1)

    if mode == "train":
        n = b * h * w
        if n < 2:
            raise ValueError(
                f"batch_norm train mode needs at least 2 values per channel, "
                f"got batch*height*width = {n}"
            )
        # accumulate statistics in double: squared f32 activations can
        # overflow long before the activations themselves do
        mu64 = xd.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        var64 = xd.var(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        mu = mu64.astype(xd.dtype)
        inv = (1.0 / np.sqrt(var64 + BN_EPS)).astype(xd.dtype)
        xhat = (xd - mu) * inv
        # in place: the arrays are shared with checkpoint/buffer views
        m = state.momentum
        state.mean *= 1.0 - m
        state.mean += m * mu64.reshape(c)
        state.var *= 1.0 - m
        state.var += m * var64.reshape(c)

        def bwd(gy):
            gxhat = gy * sc
            if x.requires_grad:
                sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv / n) * (n * gxhat - sum_g - xhat * sum_gx)
            else:
                gx = None
            gs = (gy * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
            gb = gy.sum(axis=(0, 2, 3)) if shift.requires_grad else None
            return gx, gs, gb

        return Tensor._make(xhat * sc + sh, (x, scale, shift), bwd)

    inv = (1.0 / np.sqrt(state.var.reshape(1, c, 1, 1) + BN_EPS)).astype(xd.dtype)
    xhat = (xd - state.mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv

    def bwd(gy):
        gx = gy * sc * inv if x.requires_grad else None
        gs = (gy * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = gy.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gs, gb

    return Tensor._make(xhat * sc + sh, (x, scale, shift), bwd)
