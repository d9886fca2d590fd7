"""Binary tensor file format.

Layout (little-endian throughout): 7-byte magic "MTNSR1\\0", one u8 dtype
code (0 = f32, 1 = f64, 2 = i32, 3 = u8), one u8 rank (at most 8), rank u32
dimensions, then the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import MeatkitError

MAGIC = b"MTNSR1\x00"
MAX_RANK = 8

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_KIND_TO_CODE = {"f4": 0, "f8": 1, "i4": 2, "u1": 3}


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str.lstrip("<|=")
    if key not in _KIND_TO_CODE:
        raise MeatkitError(f"unsupported tensor dtype {arr.dtype}; use f32/f64/i32/u8")
    return _KIND_TO_CODE[key]


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    code = _dtype_code(arr)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise MeatkitError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:7] != MAGIC:
        raise MeatkitError(f"{path}: bad magic, not a tensor file")
    code, rank = struct.unpack_from("<BB", raw, 7)
    if code not in _CODE_TO_DTYPE:
        raise MeatkitError(f"{path}: unknown dtype code {code}")
    if rank < 1 or rank > MAX_RANK:
        raise MeatkitError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    offset = 9 + 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    expect = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset != expect:
        raise MeatkitError(f"{path}: payload length {len(raw) - offset}, expected {expect}")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset).reshape(dims).copy()
