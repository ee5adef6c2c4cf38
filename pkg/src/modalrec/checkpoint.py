"""Binary model checkpoints.

Layout (little-endian throughout)::

    magic  b"UM2R"
    u32    format version (currently 1)
    u32    record count
    record u32 name length | name utf-8 | u32 ndim | u32 * ndim dims |
           float32 values in C order
    tail   config echo: canonical JSON, utf-8, to end of file

Tensor values are stored as float32; in memory everything is float64, so a
load/save cycle is byte-identical and training stages always start from the
32-bit values a prior stage persisted.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"UM2R"
VERSION = 1


@dataclass
class Checkpoint:
    """Named tensors plus the configuration echo that produced them."""

    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def meta_json(meta: dict) -> str:
    """Canonical JSON used for config echoes: sorted keys, no whitespace."""
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, values in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(values, dtype="<f4")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(meta_json(ckpt.meta).encode("utf-8"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    n_records = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = reader.take(4 * count)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape) \
            .astype(np.float64)
    tail = blob[reader.off:].decode("utf-8")
    try:
        meta = json.loads(tail) if tail else {}
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: bad config echo: {err}") from None
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: config echo must be a JSON object")
    return Checkpoint(tensors=tensors, meta=meta, version=version)
