"""Kernel backend selection.

Two implementations exist for every hot kernel: a compiled route and a
pure-NumPy fallback with identical contracts.  The compiled extension is
used when it imported cleanly; ``CANET_KERNELS=ref`` forces the fallback,
``CANET_KERNELS=fast`` makes a missing extension an error.

Division of labor in the fast backend: convolutions keep their matmul in
BLAS (already compiled) and delegate only the patch copy/scatter to the
extension; pooling and the distance transform run fully compiled.
"""

import os

from . import _ref

_choice = os.environ.get("CANET_KERNELS", "auto")
if _choice not in ("auto", "fast", "ref"):
    raise ImportError(
        f"CANET_KERNELS must be 'auto', 'fast' or 'ref', got {_choice!r}"
    )

if _choice == "ref":
    _pool = _conv = _ref
    BACKEND = "ref"
else:
    try:
        from . import _fast as _pool
        from . import _conv_fast as _conv
        BACKEND = "fast"
    except ImportError:
        if _choice == "fast":
            raise
        _pool = _conv = _ref
        BACKEND = "ref"

conv2d_fwd = _conv.conv2d_fwd
conv2d_bwd_input = _conv.conv2d_bwd_input
conv2d_bwd_weight = _conv.conv2d_bwd_weight
conv2d_bwd_weight_cols = _conv.conv2d_bwd_weight_cols
maxpool_fwd = _pool.maxpool_fwd
maxpool_bwd = _pool.maxpool_bwd
edt_sq = _pool.edt_sq

__all__ = [
    "BACKEND",
    "conv2d_fwd",
    "conv2d_bwd_input",
    "conv2d_bwd_weight",
    "conv2d_bwd_weight_cols",
    "maxpool_fwd",
    "maxpool_bwd",
    "edt_sq",
]
