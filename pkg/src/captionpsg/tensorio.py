"""Binary tensor files: ``FTNS`` header, little-endian float32 payload.

Layout: magic ``b"FTNS"``, version byte (1), dtype byte (1 = float32),
ndim byte, ``ndim`` little-endian uint64 dims, then the row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "BadDtypeError",
    "BadMagicError",
    "BadVersionError",
    "NonFiniteError",
    "PayloadSizeError",
    "TensorFormatError",
    "decode_tensor",
    "encode_tensor",
    "read_tensor",
    "write_tensor",
]

MAGIC = b"FTNS"
VERSION = 1
DTYPE_F32 = 1
_HEAD = 7


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class BadVersionError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class PayloadSizeError(TensorFormatError):
    """Header/dims truncated, or payload length disagrees with the dims."""


class NonFiniteError(TensorFormatError):
    pass


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("refusing to write non-finite values")
    if a.ndim > 255:
        raise TensorFormatError("too many dimensions")
    head = MAGIC + bytes([VERSION, DTYPE_F32, a.ndim]) + struct.pack(f"<{a.ndim}Q", *a.shape)
    f32 = a.astype("<f4")
    if not np.all(np.isfinite(f32)):
        raise NonFiniteError("values overflow float32")
    return head + f32.tobytes(order="C")


def decode_tensor(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEAD:
        raise PayloadSizeError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}")
    if buf[4] != VERSION:
        raise BadVersionError(f"{name}: unsupported version {buf[4]}")
    if buf[5] != DTYPE_F32:
        raise BadDtypeError(f"{name}: unsupported dtype code {buf[5]}")
    ndim = buf[6]
    end = _HEAD + 8 * ndim
    if len(buf) < end:
        raise PayloadSizeError(f"{name}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", buf[_HEAD:end])
    count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
    if len(buf) - end != 4 * count:
        raise PayloadSizeError(f"{name}: payload has {len(buf) - end} bytes, dims {dims} need {4 * count}")
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(dims)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name}: non-finite values")
    return a.astype(np.float32)


def write_tensor(array, path) -> None:
    data = encode_tensor(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))
