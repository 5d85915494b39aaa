"""Flat named-tensor checkpoints.

Binary layout (little endian): magic "TNSR", u32 version, u32 count, then per
tensor: u16 name length, UTF-8 name, u8 rank, u32 extents, f32 values.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"TNSR"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"checkpoint version mismatch: found {version}, expected {VERSION}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        off += 4 * n
        out[name] = vals.reshape(shape).astype(np.float64)
    if off != len(raw):
        raise DataError(f"trailing bytes in checkpoint: {path}")
    return out
