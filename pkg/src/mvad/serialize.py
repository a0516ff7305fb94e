"""MVT1 tensor codec.

Layout (little-endian): magic ``b"MVT1"``, u8 dtype code (1=f32, 2=f64),
u8 rank, ``rank`` u64 extents, raw row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mvad.errors import SerializationError
from mvad.tensor import Tensor

MAGIC = b"MVT1"
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def dumps(value: Tensor | np.ndarray) -> bytes:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise SerializationError(f"MVT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise SerializationError(f"rank {arr.ndim} exceeds MVT1 limit of 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(payload: bytes) -> np.ndarray:
    if payload[:4] != MAGIC:
        raise SerializationError("missing MVT1 magic")
    if len(payload) < 6:
        raise SerializationError("truncated MVT1 header")
    code, rank = struct.unpack_from("<BB", payload, 4)
    if code not in _DTYPES:
        raise SerializationError(f"unknown MVT1 dtype code {code}")
    offset = 6 + 8 * rank
    if len(payload) < offset:
        raise SerializationError("truncated MVT1 extents")
    shape = struct.unpack_from(f"<{rank}Q", payload, 6)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise SerializationError(
            f"MVT1 payload has {len(payload) - offset} bytes, shape {shape} needs {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(value: Tensor | np.ndarray, path: str | Path) -> None:
    filepath = Path(path)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    filepath.write_bytes(dumps(value))


def load_tensor(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
