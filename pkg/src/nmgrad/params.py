"""Versioned binary container for named float64 parameter blocks.

Layout (little-endian): magic "NMGP", version u16, block count u32, then
per block sorted by name: name length u16, UTF-8 name, ndim u8, each
dimension u64, then the float64 entries in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionMismatchError, TruncatedPayloadError

MAGIC = b"NMGP"
FORMAT_VERSION = 1


def save_params(params: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(params)))
        for name in sorted(params):
            block = np.ascontiguousarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", block.ndim))
            for dim in block.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(block.astype("<f8", copy=False).tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 10:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise DimensionMismatchError(f"{path}: unsupported version {version}")
    offset = 10
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            if len(data[offset:offset + name_len]) != name_len:
                raise TruncatedPayloadError(f"{path}: truncated block name")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = []
            for _ in range(ndim):
                (dim,) = struct.unpack_from("<Q", data, offset)
                shape.append(dim)
                offset += 8
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = 8 * size
            if offset + nbytes > len(data):
                raise TruncatedPayloadError(f"{path}: truncated block {name!r}")
            block = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            params[name] = block.reshape(shape).astype(np.float64, copy=True)
            offset += nbytes
        except struct.error as exc:
            raise TruncatedPayloadError(f"{path}: truncated header field") from exc
    if offset != len(data):
        raise TruncatedPayloadError(
            f"{path}: {len(data) - offset} trailing bytes after last block"
        )
    return params
