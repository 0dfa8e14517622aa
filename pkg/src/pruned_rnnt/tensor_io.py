"""Binary tensor files.

Layout (all little-endian)::

    b"TNSR" | u32 version=1 | u32 dtype (0=f64, 1=f32) | u32 rank (<=4)
    | rank x u64 extents | row-major payload

Files under 1 MiB may instead hold JSON ``{"dims": [...], "data": [...]}``
with ``data`` flattened in row-major order; ``-Infinity`` is accepted there.
Loading always returns float64 (float32 payloads are promoted exactly).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .core import TransducerError

MAGIC = b"TNSR"
VERSION = 1
MAX_RANK = 4
JSON_LIMIT = 1 << 20

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class FormatError(TransducerError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def save_tensor(path, array, dtype: str = "f64") -> None:
    """Write ``array`` in the binary format; ``dtype`` is ``"f64"`` or ``"f32"``."""
    target = {"f64": np.dtype("float64"), "f32": np.dtype("float32")}.get(dtype)
    if target is None:
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    arr = np.asarray(array)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds {MAX_RANK}", 12)
    # ascontiguousarray would turn a 0-d array into 1-d
    arr = np.asarray(arr, dtype=target.newbyteorder("<"), order="C")
    header = MAGIC + struct.pack("<III", VERSION, _CODES[target], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] == MAGIC:
        return _parse_binary(raw)
    if raw.lstrip()[:1] == b"{" and size < JSON_LIMIT:
        return _parse_json(raw)
    raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)


def _unpack(fmt: str, raw: bytes, offset: int, what: str):
    n = struct.calcsize(fmt)
    if offset + n > len(raw):
        raise FormatError(f"truncated header while reading {what}", offset)
    return struct.unpack_from(fmt, raw, offset), offset + n


def _parse_binary(raw: bytes) -> np.ndarray:
    (version, code, rank), off = _unpack("<III", raw, 4, "version/dtype/rank")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds {MAX_RANK}", 12)
    dims, off = _unpack(f"<{rank}Q", raw, off, "extents")
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = count * dt.itemsize
    have = len(raw) - off
    if have < expected:
        raise FormatError(
            f"truncated payload: need {expected} bytes, have {have}", len(raw)
        )
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", off + expected)
    data = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    return data.astype(np.float64).reshape(dims)


def _parse_json(raw: bytes) -> np.ndarray:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON tensor: {exc.msg}", exc.pos) from None
    if not isinstance(obj, dict) or "dims" not in obj or "data" not in obj:
        raise FormatError('JSON tensor needs "dims" and "data" keys', 0)
    dims = [int(d) for d in obj["dims"]]
    if len(dims) > MAX_RANK:
        raise FormatError(f"rank {len(dims)} exceeds {MAX_RANK}", 0)
    if any(d < 0 for d in dims):
        raise FormatError(f"negative extent in {dims}", 0)
    data = np.asarray(obj["data"], dtype=np.float64).ravel()
    if data.size != int(np.prod(dims, dtype=np.int64)):
        raise FormatError(
            f"data has {data.size} values but dims {dims} need {int(np.prod(dims))}", 0
        )
    return data.reshape(dims)


def save_tensor_json(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    with open(path, "w") as f:
        json.dump({"dims": list(arr.shape), "data": arr.ravel().tolist()}, f)
