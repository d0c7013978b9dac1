"""Versioned binary container for named arrays.

Layout: 8-byte magic, uint32 format version, then one record per array:
uint32 name length, utf-8 name, uint8 dtype tag, uint32 rank, rank x uint64
dims, raw little-endian buffer.  Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"GRTENSOR"
VERSION = 1

_DTYPE_TO_TAG = {"<f4": 1, "<f8": 2, "<i8": 3, "<u8": 4, "|u1": 5}
_TAG_TO_DTYPE = {v: k for k, v in _DTYPE_TO_TAG.items()}


def _dtype_tag(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder != "|" else arr.dtype.str
    if key not in _DTYPE_TO_TAG:
        raise CheckpointFormatError(f"unsupported dtype {arr.dtype}")
    return _DTYPE_TO_TAG[key]


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write named arrays in iteration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            tag = _dtype_tag(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("truncated container")
    return buf


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read all records back, preserving file order; fails atomically."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointFormatError("bad magic string")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointFormatError("truncated container")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
            if tag not in _TAG_TO_DTYPE:
                raise CheckpointFormatError(f"unknown dtype tag {tag}")
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            dtype = np.dtype(_TAG_TO_DTYPE[tag])
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(fh, count * dtype.itemsize)
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return out
