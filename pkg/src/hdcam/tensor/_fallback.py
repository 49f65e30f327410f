"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(xp: np.ndarray, K: int, stride: int, Lout: int) -> np.ndarray:
    # [B, Lout, K, C] read-only view onto the padded input
    B, _, C = xp.shape
    sb, sl, sc = xp.strides
    return as_strided(xp, (B, Lout, K, C), (sb, sl * stride, sl, sc), writeable=False)


def conv1d_forward(xp, w, bias, stride, groups):
    B, Lp, Cin = xp.shape
    K, Cig, Cout = w.shape
    Lout = (Lp - K) // stride + 1
    if Cig == 1 and Cout == groups == Cin:
        out = np.zeros((B, Lout, Cout), dtype=xp.dtype)
        span = stride * (Lout - 1) + 1
        for k in range(K):
            out += xp[:, k:k + span:stride, :] * w[k, 0]
    else:
        cols = _windows(xp, K, stride, Lout)
        Cog = Cout // groups
        if groups == 1:
            out = cols.reshape(B * Lout, K * Cin) @ w.reshape(K * Cin, Cout)
            out = out.reshape(B, Lout, Cout)
        else:
            out = np.empty((B, Lout, Cout), dtype=xp.dtype)
            for g in range(groups):
                cg = cols[..., g * Cig:(g + 1) * Cig].reshape(B * Lout, K * Cig)
                wg = w[:, :, g * Cog:(g + 1) * Cog].reshape(K * Cig, Cog)
                out[..., g * Cog:(g + 1) * Cog] = (cg @ wg).reshape(B, Lout, Cog)
    if bias is not None:
        out += bias
    return out


def conv1d_backward(xp, w, gout, stride, groups):
    B, Lp, Cin = xp.shape
    K, Cig, Cout = w.shape
    Lout = gout.shape[1]
    span = stride * (Lout - 1) + 1
    db = gout.sum(axis=(0, 1))
    dxp = np.zeros_like(xp)
    if Cig == 1 and Cout == groups == Cin:
        dw = np.empty_like(w)
        for k in range(K):
            xs = xp[:, k:k + span:stride, :]
            dw[k, 0] = (gout * xs).sum(axis=(0, 1))
            dxp[:, k:k + span:stride, :] += gout * w[k, 0]
        return dxp, dw, db

    cols = _windows(xp, K, stride, Lout)
    Cog = Cout // groups
    g2 = gout.reshape(B * Lout, Cout)
    dw = np.empty_like(w)
    dcols = np.empty((B, Lout, K, Cin), dtype=xp.dtype)
    for g in range(groups):
        ci = slice(g * Cig, (g + 1) * Cig)
        co = slice(g * Cog, (g + 1) * Cog)
        cg = cols[..., ci].reshape(B * Lout, K * Cig)
        wg = w[:, :, co].reshape(K * Cig, Cog)
        dw[:, :, co] = (cg.T @ g2[:, co]).reshape(K, Cig, Cog)
        dcols[..., ci] = (g2[:, co] @ wg.T).reshape(B, Lout, K, Cig)
    for k in range(K):
        dxp[:, k:k + span:stride, :] += dcols[:, :, k, :]
    return dxp, dw, db


def iir1_filter(x, b0, b1, a1):
    n, C = x.shape
    y = np.empty((n, C), dtype=np.float64)
    xprev = np.zeros(C)
    yprev = np.zeros(C)
    for i in range(n):
        xi = x[i].astype(np.float64)
        yi = b0 * xi + b1 * xprev - a1 * yprev
        y[i] = yi
        xprev = xi
        yprev = yi
    return y
