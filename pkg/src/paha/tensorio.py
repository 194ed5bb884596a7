"""Portable single-tensor binary container.

Layout (all integers little-endian):

    magic   4 bytes  b"PAT1"
    version u8       currently 1
    dtype   u8       tag from DTYPE_TAGS
    ndim    u8
    shape   ndim * u64
    payload raw little-endian array bytes (C order)
    crc32   u32      CRC of everything above

Writing is canonical, so write -> read -> write reproduces identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PAT1"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
    np.dtype("bool"): 5,
    np.dtype("int32"): 6,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ContainerError(ValueError):
    """Raised for malformed or corrupted tensor containers."""


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialise an array to the container byte layout."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in DTYPE_TAGS:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    head = MAGIC + struct.pack("<BBB", VERSION, DTYPE_TAGS[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.tobytes(order="C")
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    """Parse container bytes, verifying structure and CRC."""
    if len(blob) < 11 or blob[:4] != MAGIC:
        raise ContainerError("not a tensor container (bad magic)")
    version, tag, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if tag not in TAG_DTYPES:
        raise ContainerError(f"unknown dtype tag {tag}")
    off = 7
    shape = struct.unpack_from(f"<{ndim}Q", blob, off)
    off += 8 * ndim
    dtype = TAG_DTYPES[tag]
    n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload_len = n_items * dtype.itemsize
    if len(blob) != off + payload_len + 4:
        raise ContainerError("payload length does not match shape")
    (crc_stored,) = struct.unpack_from("<I", blob, off + payload_len)
    if zlib.crc32(blob[: off + payload_len]) & 0xFFFFFFFF != crc_stored:
        raise ContainerError("CRC mismatch, file is corrupted")
    arr = np.frombuffer(blob, dtype=dtype, count=n_items, offset=off)
    return arr.reshape(shape).copy()


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
