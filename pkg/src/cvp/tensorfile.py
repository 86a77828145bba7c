"""Reader and writer for the ``CVPT`` binary tensor container.

Layout (all integers little-endian)::

    b"CVPT" | u32 version (=1) | u8 dtype code | u8 ndim | ndim x u64 dims | payload

dtype codes: 1 = float32, 2 = float64. The payload is row-major little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVPT"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFormatError(ValueError):
    """Raised when a tensor file does not follow the container layout."""


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    try:
        code = _DTYPE_TO_CODE[array.dtype.newbyteorder("=")]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {array.dtype}; expected float32 or float64") from None
    header = MAGIC + struct.pack("<IBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODE_TO_DTYPE[code]).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 10 or data[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic, not a CVPT tensor file")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    offset = 10
    if len(data) < offset + 8 * ndim:
        raise TensorFormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise TensorFormatError(
            f"{source}: payload is {len(data) - offset} bytes, header implies {expected}"
        )
    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path, expected_ndim: int | None = None) -> np.ndarray:
    path = Path(path)
    array = decode_tensor(path.read_bytes(), source=str(path))
    if expected_ndim is not None and array.ndim != expected_ndim:
        raise TensorFormatError(f"{path}: expected ndim={expected_ndim}, found {array.ndim}")
    return array
