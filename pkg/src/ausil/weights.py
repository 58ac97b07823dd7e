"""Binary serialization of named float32 tensors.

Layout (all integers little-endian uint32, data little-endian float32,
C-order): magic "AUWF", version, tensor count, then per tensor the
name length, UTF-8 name, rank, dims, and raw values.  Tensors are written
sorted by name so the same mapping always produces the same bytes, which
makes file hashes usable as model identities.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"AUWF"
VERSION = 1


def save_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors atomically (temp file then rename)."""
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated tensor file: {self.label}")
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"tensor file not found: {path}") from None
    r = _Reader(blob, str(path))
    if r.take(4) != MAGIC:
        raise DataError(f"not a tensor file (bad magic): {path}")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"unsupported tensor file version {version}: {path}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n_values = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n_values), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(blob):
        raise DataError(f"trailing bytes in tensor file: {path}")
    return tensors


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
