"""HDCAM building blocks as functions over named parameter tensors.

Inputs are ``[B, L, C]`` feature maps. ``p`` is a mapping from the short
parameter names used below to tensors; missing entries (biases, LN
affines, layer scales) mean the corresponding ledger toggle is off.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

from .. import tensor as T
from ..errors import ShapeError
from ..tensor import Tensor

LN_EPS = 1e-5


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def norm(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, p.get(prefix + ".weight"), p.get(prefix + ".bias"), LN_EPS)


def linear_gelu(x: Tensor, p: Mapping[str, Tensor], prefix: str = "pw") -> Tensor:
    """Point-wise conv followed by GELU (with an optional expansion back-projection)."""
    h = T.gelu(linear(x, p[prefix + ".weight"], p.get(prefix + ".bias")))
    if prefix + "2.weight" in p:
        h = linear(h, p[prefix + "2.weight"], p.get(prefix + "2.bias"))
    return h


def stem(x: Tensor, p: Mapping[str, Tensor], patch: int = 10) -> Tensor:
    if x.shape[-2] < patch:
        raise ShapeError(f"stem needs at least {patch} samples, got L={x.shape[-2]}")
    y = T.conv1d(x, p["conv.weight"], p.get("conv.bias"), stride=patch)
    return norm(y, p, "norm")


def downsample(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    if x.shape[-2] < 2:
        raise ShapeError(f"downsampling needs L >= 2, got L={x.shape[-2]}")
    y = norm(x, p, "norm")
    return T.conv1d(y, p["conv.weight"], p.get("conv.bias"), stride=2)


def hierarchical_dwconv(x: Tensor, s: int, weights: Sequence[Tensor],
                        biases: Sequence[Tensor | None]) -> Tensor:
    """``y_1 = DW_1(x_1)``, ``y_i = DW_i(x_i + y_{i-1})``; returns concat of all ``y_i``."""
    if len(weights) != s:
        raise ShapeError(f"hierarchical_dwconv got {len(weights)} kernels for s={s}")
    parts = [x] if s == 1 else T.split_channels(x, s)
    outs = []
    prev = None
    for xi, w, b in zip(parts, weights, biases):
        inp = xi if prev is None else T.add(xi, prev)
        prev = T.conv1d(inp, w, b, stride=1, padding=1, groups=inp.shape[-1])
        outs.append(prev)
    return outs[0] if s == 1 else T.concat_channels(outs)


def hdconv_encoder(x: Tensor, p: Mapping[str, Tensor], s: int) -> Tensor:
    """``x + LinearGELU(LN(HDwConv(x)))``, optionally layer-scaled."""
    ws = [p[f"dw.{i}.weight"] for i in range(s)]
    bs = [p.get(f"dw.{i}.bias") for i in range(s)]
    h = hierarchical_dwconv(x, s, ws, bs)
    h = linear_gelu(norm(h, p, "norm"), p)
    if "gamma" in p:
        h = T.mul(h, p["gamma"])
    return T.add(x, h)


def split_heads(x: Tensor, h: int) -> Tensor:
    B, L, C = x.shape
    return T.transpose(T.reshape(x, (B, L, h, C // h)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * d))


def mha(x: Tensor, h: int, p: Mapping[str, Tensor], return_weights: bool = False):
    """Multi-head self-attention: per head ``softmax(q k^T / sqrt(d)) v``,
    heads concatenated and projected.
    """
    C = x.shape[-1]
    if C % h:
        raise ShapeError(f"{C} channels not divisible into {h} heads")
    d = C // h
    q = split_heads(linear(x, p["q.weight"], p.get("q.bias")), h)
    k = split_heads(linear(x, p["k.weight"], p.get("k.bias")), h)
    v = split_heads(linear(x, p["v.weight"], p.get("v.bias")), h)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    attn = T.softmax(scores)
    out = linear(merge_heads(T.matmul(attn, v)), p["proj.weight"], p.get("proj.bias"))
    return (out, attn) if return_weights else out


def mhsatten_encoder(x: Tensor, p: Mapping[str, Tensor], h: int) -> Tensor:
    """``LinearGELU(LN(x + MHA(LN(x)))) + x``, branches optionally layer-scaled."""
    a = mha(norm(x, p, "norm1"), h, {k[5:]: v for k, v in p.items() if k.startswith("attn.")})
    if "gamma_attn" in p:
        a = T.mul(a, p["gamma_attn"])
    z = linear_gelu(norm(T.add(x, a), p, "norm2"), p)
    if "gamma" in p:
        z = T.mul(z, p["gamma"])
    return T.add(z, x)


def head(x: Tensor, p: Mapping[str, Tensor], final_norm: bool = True) -> Tensor:
    if final_norm:
        x = norm(x, p, "norm")
    return linear(T.global_avg_pool(x), p["fc.weight"], p.get("fc.bias"))
