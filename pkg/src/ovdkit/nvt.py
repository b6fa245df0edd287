"""NVT1 binary tensor files.

Layout, all little-endian::

    b"NVT1" | dtype:u8 (0 = f32) | ndim:u8 | dims: ndim x u32 | payload

Payload is row-major and its length must match the header exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"NVT1"
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBB")


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise ValidationError("too many dimensions for NVT")
    if any(d >= 2**32 for d in arr.shape):
        raise ValidationError("NVT dims must fit in u32")
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return _HEADER.pack(MAGIC, DTYPE_F32, arr.ndim) + dims + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValidationError("truncated NVT header")
    magic, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValidationError(f"bad NVT magic {magic!r}")
    if dtype != DTYPE_F32:
        raise ValidationError(f"unsupported NVT dtype code {dtype}")
    off = _HEADER.size
    if len(buf) < off + 4 * ndim:
        raise ValidationError("truncated NVT dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - off != 4 * count:
        raise ValidationError(
            f"NVT payload is {len(buf) - off} bytes, header implies {4 * count}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return arr.reshape(dims).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
