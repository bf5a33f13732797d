"""Numpy fallback convolution kernels (im2col + BLAS matmul)."""

import numpy as np


def _im2col(x, K, stride, pad):
    N, C, H, W = x.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    if K == 1 and pad == 0:
        # 1x1 convolution: columns are just the (strided) pixels
        sub = x if stride == 1 else x[:, :, ::stride, ::stride]
        return np.ascontiguousarray(sub).reshape(N, C, Ho * Wo), Ho, Wo
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sN, sC, sH, sW = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(N, C, K, K, Ho, Wo),
        strides=(sN, sC, sH, sW, sH * stride, sW * stride),
        writeable=False,
    )
    return cols.reshape(N, C * K * K, Ho * Wo), Ho, Wo


def conv2d_forward(x, w, bias, stride, pad, return_cols=False):
    N = x.shape[0]
    Cout, Cin, K, _ = w.shape
    cols, Ho, Wo = _im2col(x, K, stride, pad)
    out = np.matmul(w.reshape(Cout, Cin * K * K), cols)
    if bias is not None:
        out += bias[None, :, None]
    out = out.reshape(N, Cout, Ho, Wo)
    return (out, cols) if return_cols else out


def conv2d_backward(x, w, dout, stride, pad, need_bias, cols=None):
    N, Cin, H, W = x.shape
    Cout, _, K, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    if cols is None:
        cols, _, _ = _im2col(x, K, stride, pad)
    g = dout.reshape(N, Cout, Ho * Wo)

    dw = np.einsum("nol,ncl->oc", g, cols, optimize=True).reshape(Cout, Cin, K, K)
    db = g.sum(axis=(0, 2)) if need_bias else None

    # dx: scatter w^T @ dout back through the im2col windows.
    dcols = np.matmul(w.reshape(Cout, Cin * K * K).T, g)  # N x (Cin K K) x L
    if K == 1 and pad == 0:
        if stride == 1:
            return dcols.reshape(N, Cin, H, W), dw, db
        dx = np.zeros((N, Cin, H, W), dtype=x.dtype)
        dx[:, :, ::stride, ::stride] = dcols.reshape(N, Cin, Ho, Wo)
        return dx, dw, db
    dcols = dcols.reshape(N, Cin, K, K, Ho, Wo)
    dxp = np.zeros((N, Cin, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    for ki in range(K):
        for kj in range(K):
            dxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += \
                dcols[:, :, ki, kj]
    if pad:
        dxp = dxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dxp), dw, db
