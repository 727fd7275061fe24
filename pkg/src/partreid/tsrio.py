"""Binary tensor files.

Layout (all integers little-endian):

    bytes 0..7   magic b"TSR1\\x00\\x00\\x00\\x00"
    bytes 8..11  u32 rank
    next rank*4  u32 extents, outermost first
    rest         float64 payload, row-major

Every tensor the pipeline persists (rendered images, exported feature
maps, golden fixtures) uses this format.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataIOError

MAGIC = b"TSR1\x00\x00\x00\x00"
MAX_RANK = 32


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write `array` as float64 row-major to `path`."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = bytearray(MAGIC)
    header += np.uint32(arr.ndim).tobytes()
    header += np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype("<f8", copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise DataIOError(f"cannot write tensor file {path}: {exc}") from exc


def read_shape(path: str | os.PathLike) -> tuple[int, ...]:
    """Read only the header, returning the declared extents."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(len(MAGIC) + 4)
            if len(head) < len(MAGIC) + 4:
                raise DataIOError(f"{path}: truncated header ({len(head)} bytes)")
            if head[: len(MAGIC)] != MAGIC:
                raise DataIOError(f"{path}: bad magic {head[:8]!r}")
            rank = int(np.frombuffer(head, dtype="<u4", count=1, offset=len(MAGIC))[0])
            if rank > MAX_RANK:
                raise DataIOError(f"{path}: implausible rank {rank}")
            ext = fh.read(4 * rank)
            if len(ext) < 4 * rank:
                raise DataIOError(f"{path}: truncated extents block")
            return tuple(int(e) for e in np.frombuffer(ext, dtype="<u4", count=rank))
    except OSError as exc:
        raise DataIOError(f"cannot read tensor file {path}: {exc}") from exc


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor file, returning a float64 array."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read tensor file {path}: {exc}") from exc

    if len(blob) < len(MAGIC) + 4:
        raise DataIOError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise DataIOError(f"{path}: bad magic {blob[:8]!r}")

    rank = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(MAGIC))[0])
    if rank > MAX_RANK:
        raise DataIOError(f"{path}: implausible rank {rank}")
    ext_off = len(MAGIC) + 4
    ext_end = ext_off + 4 * rank
    if len(blob) < ext_end:
        raise DataIOError(f"{path}: truncated extents block")
    extents = np.frombuffer(blob, dtype="<u4", count=rank, offset=ext_off)
    count = int(np.prod(extents, dtype=np.int64)) if rank > 0 else 1

    expected = ext_end + 8 * count
    if len(blob) != expected:
        raise DataIOError(
            f"{path}: payload size mismatch, expected {expected} bytes got {len(blob)}"
        )
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=ext_end)
    return payload.astype(np.float64).reshape(tuple(int(e) for e in extents))
