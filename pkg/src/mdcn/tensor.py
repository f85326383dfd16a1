"""Tensor conventions and the MDT1 binary tensor file format.

Every activation, weight and gradient in the package is a C-contiguous
``numpy.ndarray`` of dtype float64.  ``Tensor`` is only a readable alias.
"""

import struct
from pathlib import Path

import numpy as np

Tensor = np.ndarray

MAGIC = b"MDT1"


class ShapeError(ValueError):
    """Raised when an input does not have the shape a kernel requires."""


def as_tensor(data, shape=None):
    """Return ``data`` as a contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
    return arr


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return arr


def encode_mdt(arr) -> bytes:
    arr = np.require(arr, dtype="<f8", requirements="C")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_mdt(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not an MDT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 8 * count:
        raise ValueError(
            f"MDT1 payload holds {len(payload)} bytes, expected {8 * count} for dims {dims}"
        )
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(dims)


def save_mdt(path, arr) -> None:
    Path(path).write_bytes(encode_mdt(arr))


def load_mdt(path) -> Tensor:
    return decode_mdt(Path(path).read_bytes())
