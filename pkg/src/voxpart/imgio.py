"""Binary PPM (P6) color images and PGM (P5) index maps."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_ppm(path, img: np.ndarray) -> None:
    """img: [H,W,3] floats in [0,1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError("ppm image must be [H,W,3]")
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def write_pgm(path, idx: np.ndarray) -> None:
    """idx: [H,W] integer map (part ids; 255 = background)."""
    idx = np.asarray(idx)
    if idx.ndim != 2:
        raise DataError("pgm image must be [H,W]")
    h, w = idx.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(idx.astype(np.uint8).tobytes())


def _read_pnm(path, magic: bytes):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if raw[:2] != magic:
        raise DataError(f"unexpected image format in {path}")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} in {path}")
    return raw, pos, w, h


def read_ppm(path) -> np.ndarray:
    raw, pos, w, h = _read_pnm(path, b"P6")
    n = w * h * 3
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    if data.size != n:
        raise DataError(f"truncated image {path}")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    raw, pos, w, h = _read_pnm(path, b"P5")
    n = w * h
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    if data.size != n:
        raise DataError(f"truncated image {path}")
    return data.reshape(h, w).copy()
