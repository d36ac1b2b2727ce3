"""Binary named-tensor container with a trailing CRC32.

Layout (little-endian): magic ``PHYC``, u32 version, u32 tensor count, then per
tensor u32 name length, UTF-8 name, u32 ndim, u64 dims, f32 row-major data;
finally u32 CRC32 of every preceding byte.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"PHYC"
VERSION = 1


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated: header incomplete")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError("checkpoint truncated inside tensor data")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    return decode(path.read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
