"""Single-tensor container for mel and feature files.

Layout (little-endian): ``b"CTEFM1"``, uint32 ndim, ndim x uint64 dims,
then the row-major float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTEFM1"


class TensorFileError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    a = np.require(np.asarray(array, dtype="<f4"), requirements="C")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if data[: len(MAGIC)] != MAGIC:
        raise TensorFileError("bad magic: not a CTEFM1 tensor file")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise TensorFileError("truncated header")
    (ndim,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + 8 * ndim:
        raise TensorFileError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    n = int(np.prod(shape, dtype=np.int64))
    if len(data) - pos != 4 * n:
        raise TensorFileError(f"payload has {len(data) - pos} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
