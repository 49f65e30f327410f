# cython: language_level=3
"""Compiled kernels for the tensor core and the signal pipeline.

Every function here has a numpy twin in ``_fallback.py`` with the same
signature; ``backend.py`` picks one at import time.
"""
import numpy as np

cimport cython
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, floating *a, int lda,
                       floating *b, int ldb, floating *c, int ldc) noexcept nogil:
    """Column-major ``C += op(A) op(B)``."""
    cdef float sone = 1.0
    cdef double done = 1.0
    if floating is float:
        sgemm(ta, tb, &m, &n, &k, &sone, a, &lda, b, &ldb, &sone, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &done, a, &lda, b, &ldb, &done, c, &ldc)


def _dtype_of(floating[:, :, ::1] a):
    if floating is float:
        return np.float32
    return np.float64


def conv1d_forward(floating[:, :, ::1] xp, floating[:, :, ::1] w, floating[::1] bias,
                   Py_ssize_t stride, Py_ssize_t groups):
    """Grouped 1-D convolution on a pre-padded ``[B, Lp, Cin]`` input.

    ``w`` is ``[K, Cin // groups, Cout]``. Returns ``[B, Lout, Cout]``.
    """
    cdef Py_ssize_t B = xp.shape[0], Lp = xp.shape[1], Cin = xp.shape[2]
    cdef Py_ssize_t K = w.shape[0], Cig = w.shape[1], Cout = w.shape[2]
    cdef Py_ssize_t Cog = Cout // groups
    cdef Py_ssize_t Lout = (Lp - K) // stride + 1
    cdef Py_ssize_t b, t, k, g, ci, co, row, cin, base
    cdef floating xv

    out_arr = np.zeros((B, Lout, Cout), dtype=_dtype_of(xp))
    cdef floating[:, :, ::1] out = out_arr

    if Cig == 1 and Cog == 1:
        # depthwise: channel c only sees input channel c
        for b in range(B):
            for t in range(Lout):
                for k in range(K):
                    row = t * stride + k
                    for co in range(Cout):
                        out[b, t, co] += xp[b, row, co] * w[k, 0, co]
    elif groups == 1:
        # one GEMM per (item, tap): rows of the tap are stride * Cin apart,
        # so the strided input slice is a valid BLAS operand without copying
        for b in range(B):
            for k in range(K):
                _gemm("N", "N", <int>Cout, <int>Lout, <int>Cin, &w[k, 0, 0], <int>Cout,
                      &xp[b, k, 0], <int>(stride * Cin), &out[b, 0, 0], <int>Cout)
    else:
        for b in range(B):
            for t in range(Lout):
                for k in range(K):
                    row = t * stride + k
                    for g in range(groups):
                        base = g * Cog
                        for ci in range(Cig):
                            cin = g * Cig + ci
                            xv = xp[b, row, cin]
                            for co in range(Cog):
                                out[b, t, base + co] += xv * w[k, ci, base + co]
    if bias is not None:
        for b in range(B):
            for t in range(Lout):
                for co in range(Cout):
                    out[b, t, co] += bias[co]
    return out_arr


def conv1d_backward(floating[:, :, ::1] xp, floating[:, :, ::1] w, floating[:, :, ::1] gout,
                    Py_ssize_t stride, Py_ssize_t groups):
    """Gradients of ``conv1d_forward`` w.r.t. padded input, weight and bias."""
    cdef Py_ssize_t B = xp.shape[0], Lp = xp.shape[1], Cin = xp.shape[2]
    cdef Py_ssize_t K = w.shape[0], Cig = w.shape[1], Cout = w.shape[2]
    cdef Py_ssize_t Cog = Cout // groups
    cdef Py_ssize_t Lout = gout.shape[1]
    cdef Py_ssize_t b, t, k, g, ci, co, row, cin, base
    cdef floating xv, gv, acc

    dtype = _dtype_of(xp)
    dxp_arr = np.zeros((B, Lp, Cin), dtype=dtype)
    dw_arr = np.zeros((K, Cig, Cout), dtype=dtype)
    db_arr = np.zeros(Cout, dtype=dtype)
    cdef floating[:, :, ::1] dxp = dxp_arr
    cdef floating[:, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr

    for b in range(B):
        for t in range(Lout):
            for co in range(Cout):
                db[co] += gout[b, t, co]

    if Cig == 1 and Cog == 1:
        for b in range(B):
            for t in range(Lout):
                for k in range(K):
                    row = t * stride + k
                    for co in range(Cout):
                        gv = gout[b, t, co]
                        dxp[b, row, co] += gv * w[k, 0, co]
                        dw[k, 0, co] += gv * xp[b, row, co]
    elif groups == 1:
        for b in range(B):
            for k in range(K):
                # dW[k] += X_bk^T G_b ;  dX_bk += G_b W[k]^T
                _gemm("N", "T", <int>Cout, <int>Cin, <int>Lout, &gout[b, 0, 0], <int>Cout,
                      &xp[b, k, 0], <int>(stride * Cin), &dw[k, 0, 0], <int>Cout)
                _gemm("T", "N", <int>Cin, <int>Lout, <int>Cout, &w[k, 0, 0], <int>Cout,
                      &gout[b, 0, 0], <int>Cout, &dxp[b, k, 0], <int>(stride * Cin))
    else:
        for b in range(B):
            for t in range(Lout):
                for k in range(K):
                    row = t * stride + k
                    for g in range(groups):
                        base = g * Cog
                        for ci in range(Cig):
                            cin = g * Cig + ci
                            xv = xp[b, row, cin]
                            acc = 0
                            for co in range(Cog):
                                gv = gout[b, t, base + co]
                                acc += gv * w[k, ci, base + co]
                                dw[k, ci, base + co] += gv * xv
                            dxp[b, row, cin] += acc
    return dxp_arr, dw_arr, db_arr


def iir1_filter(floating[:, ::1] x, double b0, double b1, double a1):
    """Causal first-order IIR over axis 0, zero initial state, per column."""
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t i, c
    cdef double xi, yi
    xprev_arr = np.zeros(C, dtype=np.float64)
    yprev_arr = np.zeros(C, dtype=np.float64)
    out_arr = np.empty((n, C), dtype=np.float64)
    cdef double[::1] xprev = xprev_arr
    cdef double[::1] yprev = yprev_arr
    cdef double[:, ::1] y = out_arr
    for i in range(n):
        for c in range(C):
            xi = x[i, c]
            yi = b0 * xi + b1 * xprev[c] - a1 * yprev[c]
            y[i, c] = yi
            xprev[c] = xi
            yprev[c] = yi
    return out_arr
