"""Binary checkpoint container.

Layout (little-endian)::

    b"ERF1" | u32 version | u32 blob length | blob (UTF-8 text)
    u32 record count
    per record: u16 name length | name | u8 dtype tag | u8 rank | u32 dims[rank] | raw values

The blob is canonical text (config plus training progress), and records are
written in sorted name order, so saving what was loaded reproduces the file
byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ERF1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    blob: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    blob = ckpt.blob.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    blob = bytes(take(blob_len)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise CheckpointError(f"{source}: unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return Checkpoint(blob, arrays)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
