"""Reader/writer for the portable ``.tns`` tensor container.

Layout: ``b"TNSR"``, u32 version, u8 dtype code (1 = f32), u8 rank,
rank x u32 dims, then the row-major f32 payload. All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from m2tr.errors import DataError

MAGIC = b"TNSR"
VERSION = 1
DTYPE_F32 = 1


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim > 255:
        raise DataError("rank too large for .tns")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError("not a .tns container (bad magic)")
    version, dtype, rank = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported .tns version {version}")
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported .tns dtype code {dtype}")
    offset = 10
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise DataError(f".tns payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_tns(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read_tns(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode(blob)
