"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``HDCAM_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

compiled: ModuleType | None
try:
    from . import _kernels as compiled
except ImportError:
    compiled = None

python = _fallback

_BACKENDS = {"python": python}
if compiled is not None:
    _BACKENDS["compiled"] = compiled


def available() -> list[str]:
    return list(_BACKENDS)


def _initial() -> str:
    requested = os.environ.get("HDCAM_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(
                f"HDCAM_BACKEND={requested!r} unavailable; have {available()}"
            )
        return requested
    return "compiled" if compiled is not None else "python"


_name = _initial()
kernels: ModuleType = _BACKENDS[_name]


def name() -> str:
    return _name


def use(backend: str) -> None:
    """Switch the active kernel set ("compiled" or "python")."""
    global _name, kernels
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; have {available()}")
    _name = backend
    kernels = _BACKENDS[backend]
