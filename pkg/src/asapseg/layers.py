"""Layer primitives: convolution, normalizations, pooling, resize, softmax.

Each layer registers one tape node with a hand-written backward; gradients
are validated against central differences in the test suite.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .autograd import Tensor, record
from .errors import ContractError, NumericError, ShapeError, StateError


@dataclass
class ConvParams:
    weight: Tensor                  # Cout x Cin x K x K
    bias: Optional[Tensor] = None   # Cout
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def out_spatial(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output {ho}x{wo} collapses for input {h}x{w}")
        return ho, wo


@dataclass
class NormParams:
    gamma: Tensor                   # per channel
    beta: Tensor                    # per channel
    epsilon: float = 1e-5
    momentum: float = 0.1           # batch norm running-stat update rate
    running_mean: Optional[np.ndarray] = field(default=None, repr=False)
    running_var: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma/beta must be equal-length vectors")

    @property
    def channels(self):
        return self.gamma.shape[0]


def conv2d(x, p):
    """Cross-correlation with zero padding, NCHW."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input, got {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d: {x.shape[1]} input channels, "
                         f"weight expects {p.in_channels}")
    p.out_spatial(x.shape[2], x.shape[3])
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(p.weight.data)
    bd = None if p.bias is None else np.ascontiguousarray(p.bias.data)
    out, cols = kernels.conv2d_forward(xd, wd, bd, p.stride, p.padding,
                                       return_cols=True)
    inputs = [x, p.weight] + ([] if p.bias is None else [p.bias])

    def back(g):
        dx, dw, db = kernels.conv2d_backward(
            xd, wd, np.ascontiguousarray(g), p.stride, p.padding,
            need_bias=p.bias is not None, cols=cols)
        return (dx, dw) if p.bias is None else (dx, dw, db)

    return record("conv2d", inputs, out, back)


def _affine_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _norm_forward_backward(op, x, p, axes):
    """Shared normalize-then-affine op over the given reduction axes."""
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    var = np.mean((xd - mu) ** 2, axis=axes, keepdims=True)
    s = np.sqrt(var + p.epsilon)
    xhat = (xd - mu) / s
    gshape = _affine_shape(x)
    out = p.gamma.data.reshape(gshape) * xhat + p.beta.data.reshape(gshape)
    sum_axes = tuple(i for i in range(x.ndim) if i != 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        dxhat = g * p.gamma.data.reshape(gshape)
        dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) / s
        return dx, dgamma, dbeta

    return record(op, [x, p.gamma, p.beta], out, back)


def _check_norm_input(op, x, p):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects 4-D NCHW input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"{op}: {x.shape[1]} channels vs {p.channels} params")


def layer_norm(x, p):
    """One shared mean/std per sample over all of (C, H, W), then per-channel affine."""
    _check_norm_input("layer_norm", x, p)
    return _norm_forward_backward("layer_norm", x, p, axes=(1, 2, 3))


def instance_norm(x, p):
    """Per-(sample, channel) mean/std over (H, W), then per-channel affine."""
    _check_norm_input("instance_norm", x, p)
    return _norm_forward_backward("instance_norm", x, p, axes=(2, 3))


def batch_norm(x, p, training):
    """Per-channel normalization over (N, H, W); eval mode uses running stats."""
    _check_norm_input("batch_norm", x, p)
    if training:
        xd = x.data
        mu = xd.mean(axis=(0, 2, 3))
        var = np.mean((xd - mu.reshape(1, -1, 1, 1)) ** 2, axis=(0, 2, 3))
        if p.running_mean is None:
            p.running_mean = mu.copy()
            p.running_var = var.copy()
        else:
            m = p.momentum
            p.running_mean += m * (mu - p.running_mean)
            p.running_var += m * (var - p.running_var)
        return _norm_forward_backward("batch_norm", x, p, axes=(0, 2, 3))
    if p.running_mean is None:
        raise StateError("batch_norm eval before any training statistics exist")
    gshape = _affine_shape(x)
    inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
    xhat = (x.data - p.running_mean.reshape(gshape)) * inv.reshape(gshape)
    out = p.gamma.data.reshape(gshape) * xhat + p.beta.data.reshape(gshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = g * (p.gamma.data * inv).reshape(gshape)
        return dx, dgamma, dbeta

    return record("batch_norm_eval", [x, p.gamma, p.beta], out, back)


def avg_pool(x, kernel):
    """Mean over non-overlapping kernel windows; kernel must tile the input."""
    kh, kw = kernel
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects 4-D input, got {x.shape}")
    N, C, H, W = x.shape
    if kh > H or kw > W:
        raise ShapeError(f"pool kernel {kernel} larger than input {H}x{W}")
    if H % kh or W % kw:
        raise ShapeError(f"pool kernel {kernel} does not tile input {H}x{W}")
    Ho, Wo = H // kh, W // kw
    out = x.data.reshape(N, C, Ho, kh, Wo, kw).mean(axis=(3, 5))

    def back(g):
        g = g[:, :, :, None, :, None] / (kh * kw)
        return (np.broadcast_to(g, (N, C, Ho, kh, Wo, kw))
                .reshape(N, C, H, W).copy(),)

    return record("avg_pool", [x], out, back)


def _linear_coords(src, dst):
    """Align-corners-false source coordinates/weights for one axis."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(x, target, mode="bilinear"):
    """Spatial resize: bilinear (align-corners-false) or exact row replication."""
    if x.ndim != 4:
        raise ShapeError(f"resize expects 4-D input, got {x.shape}")
    Ht, Wt = int(target[0]), int(target[1])
    if Ht < 1 or Wt < 1:
        raise ShapeError(f"resize target {target} invalid")
    N, C, H, W = x.shape

    if mode == "row_tile":
        if H != 1:
            raise ContractError(f"row_tile requires source height 1, got {H}")
        if Wt != W:
            raise ContractError("row_tile only changes the vertical extent")
        out = np.broadcast_to(x.data, (N, C, Ht, W)).copy()
        return record("row_tile", [x], out,
                      lambda g: (g.sum(axis=2, keepdims=True),))

    if mode != "bilinear":
        raise ContractError(f"unknown resize mode {mode!r}")
    if (Ht, Wt) == (H, W):
        return record("resize_id", [x], x.data.copy(), lambda g: (g,))

    h0, h1, ah = _linear_coords(H, Ht)
    w0, w1, aw = _linear_coords(W, Wt)
    xd = x.data
    top = xd[:, :, h0, :] * (1 - ah)[None, None, :, None] \
        + xd[:, :, h1, :] * ah[None, None, :, None]
    out = top[:, :, :, w0] * (1 - aw)[None, None, None, :] \
        + top[:, :, :, w1] * aw[None, None, None, :]

    def back(g):
        dtop = np.zeros((N, C, Ht, W), dtype=g.dtype)
        for j in range(Wt):
            dtop[:, :, :, w0[j]] += g[:, :, :, j] * (1 - aw[j])
            dtop[:, :, :, w1[j]] += g[:, :, :, j] * aw[j]
        dx = np.zeros((N, C, H, W), dtype=g.dtype)
        for i in range(Ht):
            dx[:, :, h0[i], :] += dtop[:, :, i, :] * (1 - ah[i])
            dx[:, :, h1[i], :] += dtop[:, :, i, :] * ah[i]
        return (dx,)

    return record("resize_bilinear", [x], out, back)


def upsample_nearest2x(x):
    """Nearest-neighbour 2x spatial upsampling (FPN top-down pathway)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    N, C, H, W = x.shape

    def back(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", [x], out, back)


def softmax_lastdim(x):
    """Row-stabilized softmax along the last axis."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax input contains non-finite values")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax_lastdim", [x], s, back)
