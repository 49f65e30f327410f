"""Differentiable primitives used by the HDCAM graph.

Feature maps are row-major ``[..., L, C]``: channels last, sequence
second-to-last, any number of leading batch axes.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DataError, ShapeError
from . import backend
from .tensor import Tensor, as_tensor, record

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return record("sum", (a,), np.asarray(a.data.sum()),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return record("mean", (a,), np.asarray(a.data.mean()),
                  lambda g: (np.full(shape, g / n, dtype=a.dtype),))


# shape ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``[..., m, k] @ [..., k, n]`` with numpy broadcasting over batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {list(ad.shape)} and {list(bd.shape)}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape[-1]} vs {bd.shape[-2]}")

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", (a, b), ad @ bd, grad)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", (a,), np.transpose(a.data, axes),
                  lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def channel_slice(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return record("channel_slice", (x,), x.data[..., start:stop], grad)


def split_channels(x, s: int) -> list[Tensor]:
    """Split the last axis into ``s`` equal groups."""
    x = as_tensor(x)
    C = x.shape[-1]
    if s < 1 or C % s:
        raise ConfigError(f"cannot split C={C} channels into s={s} equal groups")
    w = C // s
    return [channel_slice(x, i * w, (i + 1) * w) for i in range(s)]


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ConfigError("concat_channels needs at least one tensor")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def grad(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record("concat_channels", parts, np.concatenate([p.data for p in parts], axis=-1), grad)


def global_avg_pool(x) -> Tensor:
    """Mean over the length axis: ``[..., L, C] -> [..., C]``."""
    x = as_tensor(x)
    shape = x.shape
    L = shape[-2]

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / L, shape).copy(),)

    return record("global_avg_pool", (x,), x.data.mean(axis=-2), grad)


# neural ops ----------------------------------------------------------------

def conv_out_length(L: int, kernel: int, stride: int, padding: int) -> int:
    return (L + 2 * padding - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D convolution over the length axis.

    ``x`` is ``[L, Cin]`` or ``[B, L, Cin]``; ``weight`` is
    ``[K, Cin // groups, Cout]``; output is ``[(B,) Lout, Cout]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d input must be [L, C] or [B, L, C], got {list(x.shape)}")
    if weight.ndim != 3:
        raise ShapeError(f"conv1d weight must be [K, Cin/groups, Cout], got {list(weight.shape)}")
    L, Cin = x.shape[-2:]
    K, Cig, Cout = weight.shape
    if stride < 1 or K < 1 or groups < 1 or padding < 0:
        raise ConfigError(f"conv1d needs stride>=1, K>=1, groups>=1, padding>=0 "
                          f"(stride={stride}, K={K}, groups={groups}, padding={padding})")
    if Cin % groups or Cout % groups:
        raise ShapeError(f"conv1d channels not divisible by groups: Cin={Cin}, Cout={Cout}, groups={groups}")
    if Cig != Cin // groups:
        raise ShapeError(f"conv1d weight expects {Cig} input channels per group, "
                         f"input gives Cin/groups={Cin // groups}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv1d bias shape {list(bias.shape)} != [Cout={Cout}]")
    Lout = conv_out_length(L, K, stride, padding)
    if Lout < 1:
        raise ShapeError(f"conv1d input length L={L} too short for K={K}, padding={padding}")

    dtype = np.result_type(x.dtype, weight.dtype)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if padding:
        xp = np.pad(xd, ((0, 0), (padding, padding), (0, 0)))
    else:
        xp = xd
    xp = np.ascontiguousarray(xp, dtype=dtype)
    wd = np.ascontiguousarray(weight.data, dtype=dtype)
    bd = None if bias is None else np.ascontiguousarray(bias.data, dtype=dtype)
    kern = backend.kernels
    out = kern.conv1d_forward(xp, wd, bd, stride, groups)
    if squeeze:
        out = out[0]

    def grad(g):
        g3 = np.ascontiguousarray(g[None] if squeeze else g, dtype=dtype)
        dxp, dw, db = kern.conv1d_backward(xp, wd, g3, stride, groups)
        dx = dxp[:, padding:padding + L]
        if squeeze:
            dx = dx[0]
        return dx, dw, (db if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv1d", inputs, out, grad)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then apply ``gamma``/``beta``."""
    x = as_tensor(x)
    C = x.shape[-1] if x.ndim else 0
    if C == 0:
        raise ConfigError("layer_norm over an empty channel axis")
    gamma = None if gamma is None else as_tensor(gamma)
    beta = None if beta is None else as_tensor(beta)
    for p, nm in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (C,):
            raise ShapeError(f"layer_norm {nm} shape {list(p.shape)} != [C={C}]")

    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    # a zero-variance row with eps=0 normalizes to 0 instead of NaN
    safe = denom > 0
    rstd = np.where(safe, 1.0 / np.sqrt(np.where(safe, denom, 1)), 0).astype(xd.dtype)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def grad(g):
        dxhat = g * gamma.data if gamma is not None else g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = rstd * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=red) if gamma is not None else None
        db = g.sum(axis=red) if beta is not None else None
        return [dx] + [d for d, p in ((dg, gamma), (db, beta)) if p is not None]

    inputs = [x] + [p for p in (gamma, beta) if p is not None]
    return record("layer_norm", inputs, out, grad)


def gelu(x) -> Tensor:
    """Exact GELU: ``x * Phi(x)`` with the erf-based normal CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def grad(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record("gelu", (x,), out.astype(xd.dtype, copy=False), grad)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if xd.shape[axis] < 1:
        raise ConfigError("softmax over an empty axis")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, grad)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {list(z.shape)}")
    B, N = z.shape
    y = np.asarray(labels)
    if y.shape != (B,):
        raise ShapeError(f"cross_entropy got {y.size} labels for batch of {B}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError("cross_entropy labels must be integers")
    bad = np.flatnonzero((y < 0) | (y >= N))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(y[i])} at index {i} outside [0, {N})")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(B)
    loss = np.asarray((lse - z[rows, y]).mean(), dtype=z.dtype)

    def grad(g):
        p = e / s
        p[rows, y] -= 1.0
        return (p * (g / B),)

    return record("cross_entropy", (logits,), loss, grad)
