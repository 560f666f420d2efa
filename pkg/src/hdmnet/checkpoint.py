"""Binary checkpoint format.

Layout, all little-endian::

    b"HDMC"  u8 version=1  u32 tensor_count
    repeated: u16 name_len, name (utf-8), u8 dtype (0=f64, 1=f32), u8 rank,
              u32 dims[rank], IEEE-754 payload in row-major order
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"HDMC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an HDMC checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 9
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: payload truncated")
            out[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
