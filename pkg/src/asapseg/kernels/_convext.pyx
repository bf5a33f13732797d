# cython: boundscheck=False, wraparound=False, cdivision=True
"""Direct convolution kernels (float64, NCHW), OpenMP-parallel.

Loop order keeps the innermost walk contiguous along the output width so the
compiler can vectorize it; threads split over (batch x channel) slices that
never share an output row.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel import prange

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   bias, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - K) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - K) // stride + 1
    out_arr = np.zeros((N, Cout, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = np.ascontiguousarray(bias)
    cdef Py_ssize_t t, n, co, ci, ho, wo, ki, kj, hi, wi, wo_lo, wo_hi
    cdef double wv, bv
    for t in prange(N * Cout, nogil=True, schedule="static"):
        n = t // Cout
        co = t % Cout
        if has_bias:
            bv = b[co]
            for ho in range(Ho):
                for wo in range(Wo):
                    out[n, co, ho, wo] = bv
        for ci in range(Cin):
            for ki in range(K):
                for kj in range(K):
                    wv = w[co, ci, ki, kj]
                    if wv == 0.0:
                        continue
                    for ho in range(Ho):
                        hi = ho * stride - pad + ki
                        if hi < 0 or hi >= H:
                            continue
                        # valid wo range: 0 <= wo*stride - pad + kj < W
                        wo_lo = 0
                        if pad > kj:
                            wo_lo = (pad - kj + stride - 1) // stride
                        wo_hi = (W - 1 + pad - kj) // stride + 1
                        if wo_hi > Wo:
                            wo_hi = Wo
                        for wo in range(wo_lo, wo_hi):
                            wi = wo * stride - pad + kj
                            out[n, co, ho, wo] += wv * x[n, ci, hi, wi]
    return out_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] dout, int stride, int pad,
                    bint need_bias):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    dx_arr = np.zeros((N, Cin, H, W), dtype=np.float64)
    dw_arr = np.zeros((Cout, Cin, K, K), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    db_arr = np.zeros(Cout, dtype=np.float64) if need_bias else None
    cdef double[::1] db
    if need_bias:
        db = db_arr
    cdef Py_ssize_t t, n, co, ci, ho, wo, ki, kj, hi, wi, wo_lo, wo_hi
    cdef double wv, acc

    # dx: threads split over (n, ci); each writes a disjoint input slice.
    for t in prange(N * Cin, nogil=True, schedule="static"):
        n = t // Cin
        ci = t % Cin
        for co in range(Cout):
            for ki in range(K):
                for kj in range(K):
                    wv = w[co, ci, ki, kj]
                    if wv == 0.0:
                        continue
                    for ho in range(Ho):
                        hi = ho * stride - pad + ki
                        if hi < 0 or hi >= H:
                            continue
                        wo_lo = 0
                        if pad > kj:
                            wo_lo = (pad - kj + stride - 1) // stride
                        wo_hi = (W - 1 + pad - kj) // stride + 1
                        if wo_hi > Wo:
                            wo_hi = Wo
                        for wo in range(wo_lo, wo_hi):
                            wi = wo * stride - pad + kj
                            dx[n, ci, hi, wi] += wv * dout[n, co, ho, wo]

    # dw/db: threads split over co; each owns its filter slice.
    for co in prange(Cout, nogil=True, schedule="static"):
        for n in range(N):
            if need_bias:
                acc = 0.0
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = acc + dout[n, co, ho, wo]
                db[co] += acc
            for ci in range(Cin):
                for ki in range(K):
                    for kj in range(K):
                        acc = 0.0
                        for ho in range(Ho):
                            hi = ho * stride - pad + ki
                            if hi < 0 or hi >= H:
                                continue
                            wo_lo = 0
                            if pad > kj:
                                wo_lo = (pad - kj + stride - 1) // stride
                            wo_hi = (W - 1 + pad - kj) // stride + 1
                            if wo_hi > Wo:
                                wo_hi = Wo
                            for wo in range(wo_lo, wo_hi):
                                wi = wo * stride - pad + kj
                                acc = acc + dout[n, co, ho, wo] * x[n, ci, hi, wi]
                        dw[co, ci, ki, kj] += acc
    return dx_arr, dw_arr, db_arr
