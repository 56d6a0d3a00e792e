"""Binary checkpoint format: named tensors plus a config snapshot.

Layout (all integers little-endian):
  magic  b"PWCK"
  u32    format version (currently 1)
  u32    tensor count
  per tensor:
    u32  name length, then UTF-8 name
    u8   dtype tag (0 = float32, 1 = float64)
    u8   rank, then u32 dims
    raw  row-major little-endian data
  u64    snapshot length, then UTF-8 JSON snapshot
         (train config, epoch, metric history)

Round trips are bit-exact; truncated or foreign files fail with the offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PWCK"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"float32": 0, "float64": 1}


class CheckpointError(ValueError):
    """Unreadable or malformed checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(ckpt.tensors))]
    for name, tensor in ckpt.tensors.items():
        arr = np.asarray(tensor)
        if arr.dtype.name not in _TAG_FOR_KIND:
            raise CheckpointError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tag = _TAG_FOR_KIND[arr.dtype.name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    snapshot = json.dumps({"config": ckpt.config, "epoch": ckpt.epoch,
                           "history": ckpt.history}, sort_keys=True)
    encoded = snapshot.encode("utf-8")
    parts.append(struct.pack("<Q", len(encoded)))
    parts.append(encoded)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated at offset {self.pos} "
                f"(needed {count} bytes, have {len(self.raw) - self.pos})")
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    reader = _Reader(raw, path)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported by this reader "
            f"(expected {VERSION})")
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(
                f"{path}: unknown dtype tag {tag} at offset {reader.pos}")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        dtype = _DTYPE_TAGS[tag]
        n_items = int(np.prod(dims)) if dims else 1
        data = reader.take(n_items * dtype.itemsize)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    (snap_len,) = reader.unpack("<Q")
    snapshot = json.loads(reader.take(snap_len).decode("utf-8"))
    return Checkpoint(tensors, snapshot["config"], snapshot["epoch"],
                      snapshot["history"])
