"""Minimal dense tensor library with reverse-mode autodiff."""
from . import backend
from .ops import (
    add,
    channel_slice,
    concat_channels,
    conv1d,
    conv_out_length,
    cross_entropy,
    gelu,
    global_avg_pool,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    split_channels,
    sub,
    sum,
    transpose,
)
from .tensor import (
    Node,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_tape,
    is_grad_enabled,
    no_grad,
    set_debug,
    using_tape,
)

__all__ = [
    "Node", "Tape", "Tensor", "add", "as_tensor", "backend", "backward",
    "channel_slice", "concat_channels", "conv1d", "conv_out_length",
    "cross_entropy", "gelu", "get_tape", "global_avg_pool", "is_grad_enabled",
    "layer_norm", "matmul", "mean", "mul", "no_grad", "reshape", "scale",
    "set_debug", "softmax", "split_channels", "sub", "sum", "transpose",
    "using_tape",
]
