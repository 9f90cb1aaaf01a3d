"""Minimal binary PPM (P6) / PGM (P5) reader and writer, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    pass


def write_ppm(path, image) -> None:
    """Write an H x W x 3 uint8 array (or float in [0, 1]) as binary P6."""
    arr = _to_uint8(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise NetpbmError(f"{path}: PPM needs an HxWx3 array, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path, image) -> None:
    arr = _to_uint8(image)
    if arr.ndim != 2:
        raise NetpbmError(f"{path}: PGM needs an HxW array, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_netpbm(path) -> np.ndarray:
    """Read a P5 or P6 file. Returns uint8 HxW (P5) or HxWx3 (P6)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise NetpbmError(f"{path}: truncated raster ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def _to_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise NetpbmError("integer image values must lie in [0, 255]")
    return arr.astype(np.uint8)
