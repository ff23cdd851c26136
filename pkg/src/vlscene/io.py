"""Binary containers: ``VLFT`` dense tensors and ``VLSC`` label grids.

VLFT layout (all little-endian)::

    b"VLFT" | version u32 | rank u32 | extents u32 * rank | dtype u8 (1=f32, 2=f64) | payload

VLSC layout::

    b"VLSC" | version u32 | extents u32 * 3 | dtype u8 (1=u8, 2=u16) | payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VLFT_MAGIC = b"VLFT"
VLSC_MAGIC = b"VLSC"
VLFT_VERSION = 1
VLSC_VERSION = 1

_FT_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_SC_DTYPES = {1: np.dtype("u1"), 2: np.dtype("<u2")}


class FormatError(ValueError):
    """Malformed or truncated binary payload."""


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what} at byte offset {offset}: need {n} bytes, "
                          f"{len(buf) - offset} available")
    return buf[offset:offset + n]


def encode_vlft(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        tag = 1
    elif arr.dtype == np.float64:
        tag = 2
    else:
        raise TypeError(f"VLFT stores float32/float64 only, got {arr.dtype}")
    head = VLFT_MAGIC + struct.pack("<II", VLFT_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=_FT_DTYPES[tag]).tobytes()


def decode_vlft(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one VLFT block starting at ``offset``; returns (array, end offset)."""
    magic = _read_exact(buf, offset, 4, "magic")
    if magic != VLFT_MAGIC:
        raise FormatError(f"bad VLFT magic {magic!r} at byte offset {offset}")
    version, rank = struct.unpack("<II", _read_exact(buf, offset + 4, 8, "header"))
    if version != VLFT_VERSION:
        raise FormatError(f"unsupported VLFT version {version} (expected {VLFT_VERSION})")
    pos = offset + 12
    shape = struct.unpack(f"<{rank}I", _read_exact(buf, pos, 4 * rank, "extents"))
    pos += 4 * rank
    (tag,) = struct.unpack("<B", _read_exact(buf, pos, 1, "dtype tag"))
    pos += 1
    if tag not in _FT_DTYPES:
        raise FormatError(f"unknown VLFT dtype tag {tag} at byte offset {pos - 1}")
    dt = _FT_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = _read_exact(buf, pos, nbytes, "payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if not np.all(np.isfinite(arr)):
        raise FormatError("VLFT payload contains non-finite values")
    return arr, pos + nbytes


def save_vlft(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_vlft(arr))


def load_vlft(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_vlft(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return arr


def encode_vlsc(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"VLSC stores 3-D label grids, got shape {labels.shape}")
    if labels.min(initial=0) < 0:
        raise ValueError("VLSC labels must be non-negative")
    tag = 1 if labels.max(initial=0) <= 255 else 2
    head = VLSC_MAGIC + struct.pack("<I", VLSC_VERSION) + struct.pack("<3I", *labels.shape)
    return head + struct.pack("<B", tag) + np.ascontiguousarray(labels, dtype=_SC_DTYPES[tag]).tobytes()


def decode_vlsc(buf: bytes) -> np.ndarray:
    magic = _read_exact(buf, 0, 4, "magic")
    if magic != VLSC_MAGIC:
        raise FormatError(f"bad VLSC magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, 4, "version"))
    if version != VLSC_VERSION:
        raise FormatError(f"unsupported VLSC version {version} (expected {VLSC_VERSION})")
    shape = struct.unpack("<3I", _read_exact(buf, 8, 12, "extents"))
    (tag,) = struct.unpack("<B", _read_exact(buf, 20, 1, "dtype tag"))
    if tag not in _SC_DTYPES:
        raise FormatError(f"unknown VLSC dtype tag {tag}")
    dt = _SC_DTYPES[tag]
    nbytes = int(np.prod(shape)) * dt.itemsize
    payload = _read_exact(buf, 21, nbytes, "payload")
    if len(buf) != 21 + nbytes:
        raise FormatError(f"{len(buf) - 21 - nbytes} trailing bytes after VLSC payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(np.int64)


def save_vlsc(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_vlsc(labels))


def load_vlsc(path: str | Path) -> np.ndarray:
    return decode_vlsc(Path(path).read_bytes())

