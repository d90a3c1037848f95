"""Binary checkpoint format.

Layout::

    b"ASQCKPT1"
    repeated until EOF:
        u32  name length (bytes)      little-endian
        ...  UTF-8 name
        u32  rank
        u64  extent * rank
        f64  payload, row-major, product(extents) values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ASQCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps rank 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r} at offset 0")
    out: dict[str, np.ndarray] = {}
    pos = 8
    end = len(blob)
    while pos < end:
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise struct.error("short name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 8 * count > end:
                raise struct.error("short payload")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint near offset {pos}: {exc}") from None
        out[name] = arr.reshape(shape)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
