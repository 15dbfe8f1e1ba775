"""The ``.f32t`` binary tensor format.

Layout: magic bytes ``F32T``, u32 little-endian rank, rank u32 extents,
then the row-major payload as IEEE-754 little-endian 32-bit floats.
Checkpoints, images, and cubemaps all go through this one format.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"F32T"


class TensorFileError(Exception):
    pass


def save_f32t(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise TensorFileError(f"save_f32t: non-finite values, refusing to write {path}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_f32t(path) -> np.ndarray:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(4)
        if head != MAGIC:
            raise TensorFileError(
                f"{path}: bad magic {head!r} at byte 0 (expected {MAGIC!r})"
            )
        rank_bytes = f.read(4)
        if len(rank_bytes) < 4:
            raise TensorFileError(f"{path}: truncated rank field at byte 4")
        (rank,) = struct.unpack("<I", rank_bytes)
        if rank > 16:
            raise TensorFileError(f"{path}: implausible rank {rank} at byte 4")
        ext_bytes = f.read(4 * rank)
        if len(ext_bytes) < 4 * rank:
            raise TensorFileError(f"{path}: truncated extents at byte 8")
        extents = struct.unpack(f"<{rank}I", ext_bytes) if rank else ()
        count = 1
        for e in extents:
            count *= e
        expected = 8 + 4 * rank + 4 * count
        if size != expected:
            raise TensorFileError(
                f"{path}: payload size mismatch, expected {expected} bytes total "
                f"but file has {size}"
            )
        data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
    return data.reshape(extents).copy()
