"""SATN binary tensor files: magic "SATN", u16 version, u16 rank, u64 dims,
then little-endian float32 scalars in row-major order."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import SparseAttnError

__all__ = ["TensorFormatError", "FORMAT_VERSION", "write_tensor", "read_tensor"]

MAGIC = b"SATN"
FORMAT_VERSION = 1

# Parsing refuses element counts above this bound so corrupt dims fail
# cleanly instead of attempting a huge allocation.
_MAX_ELEMENTS = 1 << 40


class TensorFormatError(SparseAttnError):
    """Malformed SATN file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def write_tensor(path, array: np.ndarray) -> None:
    """Write one array as a SATN file; scalars are stored as float32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a SATN file, validating magic, version, and total size."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise TensorFormatError("not a SATN tensor file", offset=0)
    if len(data) < 8:
        raise TensorFormatError(
            f"truncated header: expected at least 8 bytes, got {len(data)}", offset=len(data)
        )
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}", offset=4
        )
    dims_end = 8 + 8 * rank
    if len(data) < dims_end:
        raise TensorFormatError(
            f"truncated dims: expected {dims_end} header bytes, got {len(data)}",
            offset=len(data),
        )
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    count = 1
    for s in shape:
        count *= s
    if count > _MAX_ELEMENTS:
        raise TensorFormatError(f"implausible element count {count}", offset=8)
    expected = dims_end + 4 * count
    if len(data) != expected:
        raise TensorFormatError(
            f"payload size mismatch: expected {expected} bytes total, got {len(data)}",
            offset=min(len(data), dims_end),
        )
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=dims_end)
    return flat.reshape(shape).copy()
