"""Binary container for named f32 arrays.

Shared encoding for the encoder weight file and the fitted embedding
pipeline file. Layout, all little-endian:

    magic: 4 bytes (caller-chosen)
    version: u16
    count: u32 (number of arrays)
    per array:
        name_len: u16, name: utf-8 bytes
        rank: u8
        dims: rank x u32
        data: little-endian f32, C order
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import FormatError


def write_named_arrays(path, magic: bytes, arrays: Mapping[str, np.ndarray],
                       version: int = 1) -> None:
    """Serialize an ordered mapping of named arrays to `path` as f32."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", version, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_named_arrays(path, magic: bytes, version: int = 1) -> dict[str, np.ndarray]:
    """Read back a file written by `write_named_arrays`.

    Raises FormatError on a wrong magic, unsupported version, or a
    truncated body; no partial result is returned.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated file: needed {n} bytes at offset {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    got_version, count = struct.unpack("<HI", take(6))
    if got_version != version:
        raise FormatError(f"unsupported version {got_version} (expected {version})")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * 4
        arrays[name] = np.frombuffer(take(n_bytes), dtype="<f4").reshape(dims).copy()
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last array")
    return arrays
