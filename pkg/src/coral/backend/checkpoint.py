"""Portable binary checkpoint container.

Layout (all integers 64-bit little-endian):
    magic "CRL1"
    entry count
    per entry: name length, utf-8 name bytes, rank, dims, raw float32
               little-endian values (row-major)

Arrays round-trip bit-exactly; entry order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRL1"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<Q", data.ndim))
        for dim in data.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    offset = 4

    def read_u64() -> int:
        nonlocal offset
        if offset + 8 > len(blob):
            raise ValueError(f"{path}: truncated container")
        (value,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        return value

    count = read_u64()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = read_u64()
        if offset + name_len > len(blob):
            raise ValueError(f"{path}: truncated container")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        n_values = 1
        for dim in shape:
            n_values *= dim
        end = offset + 4 * n_values
        if end > len(blob):
            raise ValueError(f"{path}: truncated container")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float32)
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays
