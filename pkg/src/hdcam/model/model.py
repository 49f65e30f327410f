"""The HDCAM parameter store and its stage program."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ..tensor import Tensor
from . import layers
from .config import ModelConfig, require_valid

STEM_PATCH = 10
DW_KERNEL = 3


@dataclass(frozen=True)
class Block:
    kind: str        # stem | down | hdconv | mhsatten | head
    prefix: str      # parameter name prefix, e.g. "stages.1.blocks.0"
    stage: int       # 1..3, 4 for the classifier
    channels: int
    arg: int = 0     # scales for hdconv, heads for mhsatten


def stage_program(cfg: ModelConfig) -> list[Block]:
    """Ordered block list; MHSAtten sits at stage end or right after the stage entry."""
    C = cfg.stage_channels
    scales = cfg.effective_scales()
    prog = [Block("stem", "stem", 1, C[0])]
    for i in range(3):
        st = i + 1
        if i > 0:
            prog.append(Block("down", f"stages.{st}.down", st, C[i]))
        convs = [("hdconv", scales[i])] * cfg.hdconv_counts[i]
        attns = [("mhsatten", cfg.heads[i])] * cfg.mhsatten_counts[i]
        order = attns + convs if cfg.mhsatten_position == "stage_begin" else convs + attns
        for j, (kind, arg) in enumerate(order):
            prog.append(Block(kind, f"stages.{st}.blocks.{j}", st, C[i], arg))
    prog.append(Block("head", "head", 4, C[2]))
    return prog


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in a stable order."""
    tg = cfg.toggles
    out: list[tuple[str, tuple[int, ...], str]] = []

    def ln(prefix, C):
        if tg.ln_affine:
            out.append((f"{prefix}.weight", (C,), "ones"))
            out.append((f"{prefix}.bias", (C,), "zeros"))

    def conv(prefix, K, cin_g, cout):
        out.append((f"{prefix}.weight", (K, cin_g, cout), "conv"))
        if tg.bias:
            out.append((f"{prefix}.bias", (cout,), "conv_bias"))

    def dense(prefix, cin, cout, init):
        out.append((f"{prefix}.weight", (cin, cout), init))
        if tg.bias:
            out.append((f"{prefix}.bias", (cout,), "conv_bias" if init == "conv" else "zeros"))

    def pointwise(prefix, C):
        hidden = C * tg.expansion
        dense(f"{prefix}.pw", C, hidden, "conv")
        if tg.expansion > 1:
            dense(f"{prefix}.pw2", hidden, C, "conv")

    prev = cfg.input_channels
    for b in stage_program(cfg):
        p, C = b.prefix, b.channels
        if b.kind == "stem":
            conv(f"{p}.conv", STEM_PATCH, cfg.input_channels, C)
            ln(f"{p}.norm", C)
        elif b.kind == "down":
            ln(f"{p}.norm", prev)
            conv(f"{p}.conv", 2, prev, C)
        elif b.kind == "hdconv":
            for i in range(b.arg):
                conv(f"{p}.dw.{i}", DW_KERNEL, 1, C // b.arg)
            ln(f"{p}.norm", C)
            pointwise(p, C)
            if tg.layer_scale:
                out.append((f"{p}.gamma", (C,), "ones"))
        elif b.kind == "mhsatten":
            ln(f"{p}.norm1", C)
            for nm in ("q", "k", "v", "proj"):
                dense(f"{p}.attn.{nm}", C, C, "trunc_normal")
            if tg.layer_scale:
                out.append((f"{p}.gamma_attn", (C,), "ones"))
            ln(f"{p}.norm2", C)
            pointwise(p, C)
            if tg.layer_scale:
                out.append((f"{p}.gamma", (C,), "ones"))
        elif b.kind == "head":
            if tg.final_norm:
                ln(f"{p}.norm", C)
            dense(f"{p}.fc", C, cfg.num_classes, "trunc_normal")
        prev = C
    return out


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-1]))


def _init(kind: str, shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "ones":
        return np.ones(shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind in ("conv", "conv_bias"):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if kind == "trunc_normal":
        x = rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return 0.02 * x
    raise ValueError(kind)


class HdcamModel:
    """Named parameters plus the forward graph for one ``ModelConfig``.

    ``seed`` fixes the initialization; ``init="zeros"`` skips random
    draws (useful for parameter accounting).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, init: str = "random"):
        self.config = require_valid(config)
        self.program = stage_program(config)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        fan_in = {}
        for name, shape, kind in _param_shapes(config):
            if kind != "conv_bias":
                fan_in[name.rsplit(".", 1)[0]] = _fan_in(name, shape)
            if init == "zeros":
                arr = np.zeros(shape)
            else:
                arr = _init(kind, shape, fan_in.get(name.rsplit(".", 1)[0], 1), rng)
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

    # parameter access ------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def block_params(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {list(arr.shape)} != model shape {list(p.shape)}")
            p.data = arr.astype(self.dtype).copy()

    # forward ---------------------------------------------------------------

    def run_block(self, block: Block, x: Tensor) -> Tensor:
        p = self.block_params(block.prefix)
        if block.kind == "stem":
            return layers.stem(x, p, STEM_PATCH)
        if block.kind == "down":
            return layers.downsample(x, p)
        if block.kind == "hdconv":
            return layers.hdconv_encoder(x, p, block.arg)
        if block.kind == "mhsatten":
            return layers.mhsatten_encoder(x, p, block.arg)
        return layers.head(x, p, self.config.toggles.final_norm)

    def expected_length(self, fs: float = 2000.0) -> int:
        return self.config.input_length(fs)

    def forward(self, x, trace: list | None = None, fs: float = 2000.0) -> Tensor:
        """``[L, C_in]`` -> ``[num_classes]`` or ``[B, L, C_in]`` -> ``[B, num_classes]``.

        If ``trace`` is a list, ``(block, output)`` pairs are appended to it.
        """
        x = T.as_tensor(x)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3:
            raise ShapeError(f"model input must be [L, C] or [B, L, C], got {list(x.shape)}")
        L_exp = self.expected_length(fs)
        if x.shape[1] != L_exp or x.shape[2] != self.config.input_channels:
            raise ShapeError(
                f"model expects windows of L={L_exp} samples x {self.config.input_channels} channels "
                f"({self.config.window_ms} ms at {fs:g} Hz), got L={x.shape[1]} x {x.shape[2]}"
            )
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype))
        for block in self.program:
            x = self.run_block(block, x)
            if trace is not None:
                trace.append((block, x))
        return T.reshape(x, x.shape[1:]) if single else x

    __call__ = forward

    def stage_lengths(self, fs: float = 2000.0) -> tuple[int, int, int]:
        """Sequence length seen by each stage for this config's window."""
        x = np.zeros((1, self.expected_length(fs), self.config.input_channels), dtype=self.dtype)
        trace: list = []
        with T.no_grad():
            self.forward(x, trace=trace, fs=fs)
        lengths = {}
        for block, out in trace:
            if block.kind in ("stem", "down"):
                lengths[block.stage] = out.shape[1]
        return lengths[1], lengths[2], lengths[3]
