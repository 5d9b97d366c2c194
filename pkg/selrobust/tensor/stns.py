"""STNS binary tensor format.

Layout: ``b"STNS"``, version byte, rank (u8), rank x dims (u32 LE), then
row-major float64 LE data.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from selrobust.errors import ShapeError, StnsFormatError

logger = logging.getLogger(__name__)

MAGIC = b"STNS"
VERSION = 1
_HEADER = struct.Struct("<4sBB")


def encode_stns(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise ShapeError(f"STNS supports rank <= 255, got {arr.ndim}")
    if any(d < 1 or d >= 2**32 for d in arr.shape):
        raise ShapeError(f"STNS extents must be positive u32 values, got {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_stns(payload: bytes) -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise StnsFormatError("truncated STNS header")
    magic, version, rank = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise StnsFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StnsFormatError(f"unsupported STNS version {version}")
    offset = _HEADER.size
    dims_size = 4 * rank
    if len(payload) < offset + dims_size:
        raise StnsFormatError("truncated STNS dimension block")
    shape = struct.unpack_from(f"<{rank}I", payload, offset)
    offset += dims_size
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(payload) - offset != 8 * count:
        raise StnsFormatError(
            f"STNS body holds {len(payload) - offset} bytes, expected {8 * count} for shape {shape}"
        )
    data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


def write_stns(path: Union[str, Path], array: np.ndarray) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_stns(array))
    logger.debug("Wrote STNS tensor %s shape=%s", target, np.shape(array))
    return target


def read_stns(path: Union[str, Path]) -> np.ndarray:
    source = Path(path)
    try:
        payload = source.read_bytes()
    except OSError as exc:
        raise StnsFormatError(f"cannot read {source}: {exc}") from exc
    return decode_stns(payload)
