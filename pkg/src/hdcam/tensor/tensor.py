"""Dense tensors and the reverse-mode tape.

Every op whose output depends on a grad-enabled tensor appends one
:class:`Node` to the thread's current :class:`Tape`. :func:`backward`
walks that tape in exact reverse recording order and clears it.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericalError, UsageError

_FLOATS = (np.float32, np.float64)


class Tensor:
    """N-dimensional float32/float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t.is_leaf = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={list(self.shape)}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the ops module does the work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a constant is supported")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.debug = False


_state = _State()


def get_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def using_tape(tape: Tape) -> Iterator[Tape]:
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise on the first one."""
    _state.debug = bool(enabled)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _state.debug and not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        _state.tape.record(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every grad-enabled leaf that ``loss`` depends on.

    Leaf gradients accumulate into any existing ``.grad``. The tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    tape = _state.tape if tape is None else tape
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any grad-enabled tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        if g.dtype != t.data.dtype:
            g = g.astype(t.data.dtype)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()
