"""SWGT binary tensor format.

Layout: magic ``b"SWGT"``, u32 rank, rank x u64 extents, then the payload as
little-endian float32 in row-major order. Checkpoints are plain concatenations
of such records.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"SWGT"


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps 0-d scalars 0-d
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad SWGT magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated SWGT payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    size = Path(path).stat().st_size
    with open(path, "rb") as fh:
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out
