"""Convolution kernel backend selection.

Two interchangeable backends exist: `python_ref` (im2col + BLAS matmul) and
the compiled direct-loop extension `_convext`. On typical hosts the BLAS
path wins (see benchmarks/bench_kernels.py), so it is the default; set
ASAPSEG_BACKEND=compiled to force the extension, =python to force the
fallback. The compiled path is float64-only; float32 tensors always take
the numpy path.
"""

import os

import numpy as np

from . import python_ref

try:
    from . import _convext
except ImportError:
    _convext = None

_choice = os.environ.get("ASAPSEG_BACKEND", "auto")
if _choice == "compiled":
    if _convext is None:
        raise ImportError("ASAPSEG_BACKEND=compiled but the extension is missing")
    _ext = _convext
elif _choice == "python":
    _ext = None
else:
    _ext = None  # auto: BLAS im2col is the faster route on this package's sizes

BACKEND = "compiled" if _ext is not None else "python"
HAVE_COMPILED = _convext is not None


def conv2d_forward(x, w, bias, stride, pad, return_cols=False):
    """Forward convolution.

    With return_cols=True the result is (out, cols) where cols is the im2col
    matrix for reuse in conv2d_backward, or None on the compiled backend
    (which computes the convolution directly, without an im2col step).
    """
    if _ext is not None and x.dtype == np.float64:
        out = _ext.conv2d_forward(x, w, bias, stride, pad)
        return (out, None) if return_cols else out
    return python_ref.conv2d_forward(x, w, bias, stride, pad,
                                     return_cols=return_cols)


def conv2d_backward(x, w, dout, stride, pad, need_bias, cols=None):
    if _ext is not None and x.dtype == np.float64:
        return _ext.conv2d_backward(x, w, dout, stride, pad, need_bias)
    return python_ref.conv2d_backward(x, w, dout, stride, pad, need_bias,
                                      cols=cols)
