"""CLNT checkpoint container: metadata lines plus named float32 tensors.

Layout (little-endian)::

    b"CLNT" | u32 version | u32 meta_len | meta_len bytes of "key=value\\n" lines
    | u32 n_tensors | per tensor: u32 name_len, name, u32 rank, rank * u32 dims,
    prod(dims) * f32 values (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CLNT"
VERSION = 1
F32_MAX = float(np.finfo(np.float32).max)


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ck: Checkpoint) -> bytes:
    lines = []
    for key, value in ck.metadata.items():
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    meta = "".join(lines).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ck.tensors))]
    for name, arr in ck.tensors.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name} has non-finite values")
        if a.size and np.max(np.abs(a)) > F32_MAX:
            raise CheckpointError(f"tensor {name} exceeds the float32 range")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def _utf8(raw) -> str:
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("checkpoint text is not UTF-8") from exc


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a CLNT checkpoint")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_text = _utf8(take(u32()))
    metadata = {}
    lines = meta_text.split("\n")
    if lines[-1]:
        raise CheckpointError("metadata block must end with a newline")
    for line in lines[:-1]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad metadata line {line!r}")
        metadata[key] = value
    tensors = {}
    for _ in range(u32()):
        name = _utf8(take(u32()))
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(metadata, tensors)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
