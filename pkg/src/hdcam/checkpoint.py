"""Checkpoint files: JSON header plus named little-endian float32 tensors.

Layout::

    b"HDCK" | u16 version | u32 header length | header JSON (UTF-8)
    then per tensor: u32 name length | name (UTF-8) | u8 ndim | ndim x u32 dims | float32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import HdcamModel, ModelConfig

MAGIC = b"HDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(path, model: HdcamModel, header: dict | None = None) -> Path:
    """Write ``model`` plus an arbitrary JSON ``header`` (pipeline scales, seed, ...)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(header or {})
    meta["config"] = model.config.to_dict()
    meta["tensors"] = list(model.params)
    hbytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for name, p in model.named_parameters():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not an HDCAM checkpoint (magic {magic!r}, version {version})")
    off = _PREFIX.size
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    off += hlen
    tensors: dict[str, np.ndarray] = {}
    try:
        while off < len(raw):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(raw):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor table ({exc})") from None
    if list(tensors) != header.get("tensors"):
        raise CheckpointError(f"{path}: tensor table does not match header")
    return header, tensors


def load_checkpoint(path) -> tuple[HdcamModel, dict]:
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
        model = HdcamModel(cfg, init="zeros")
        model.load_state_dict(tensors)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot rebuild model ({exc})") from None
    return model, header
