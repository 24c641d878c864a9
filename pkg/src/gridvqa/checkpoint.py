"""Binary checkpoint format.

All integers are little-endian uint32, all reals little-endian float32::

    magic        8 bytes  b"GVQACKPT"
    version      uint32   1
    config_len   uint32   byte length of the config block
    config       UTF-8 JSON, keys sorted, {"encoder": {...}, "run": {...}}
    count        uint32   number of tensors
    count times:
        name_len uint32
        name     UTF-8 bytes
        ndims    uint32
        dims     ndims x uint32
        values   prod(dims) x float32, row-major
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import EncoderConfig, ModelWeights
from .tensor import Tensor

MAGIC = b"GVQACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(weights: ModelWeights, run: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    block = json.dumps({"encoder": weights.config.to_dict(), "run": run or {}}, sort_keys=True,
                       separators=(",", ":")).encode("utf-8")
    buf.write(_u32(len(block)))
    buf.write(block)
    buf.write(_u32(len(weights.params)))
    for name, t in weights.params.items():
        raw = name.encode("utf-8")
        buf.write(_u32(len(raw)))
        buf.write(raw)
        buf.write(_u32(t.ndim))
        for n in t.shape:
            buf.write(_u32(n))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[ModelWeights, dict]:
    """Parse a checkpoint; returns the weights and the stored run settings."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    block = json.loads(bytes(take(u32())).decode("utf-8"))
    config = EncoderConfig(**block["encoder"])
    params = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        dims = [u32() for _ in range(u32())]
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        params[name] = Tensor(values.astype(np.float32), requires_grad=True)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelWeights(config, params), block.get("run", {})


def save(path: str | Path, weights: ModelWeights, run: dict | None = None) -> None:
    Path(path).write_bytes(dumps(weights, run))


def load(path: str | Path) -> tuple[ModelWeights, dict]:
    return loads(Path(path).read_bytes())
