"""Binary PGM (P5) and PPM (P6) files, 8-bit only."""

from __future__ import annotations

import os

import numpy as np

_MAGIC = {b"P5": 1, b"P6": 3}


def _tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(data[start:pos])
    return out, pos


def decode(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into a uint8 array, ``(H, W)`` for grey, ``(H, W, 3)`` for RGB."""
    magic = data[:2]
    if magic not in _MAGIC:
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    channels = _MAGIC[magic]
    (w, h, maxval), pos = _tokens(data, 3, 2)
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm is supported, got maxval {maxval}")
    # exactly one whitespace byte separates header and raster
    pos += 1
    size = width * height * channels
    raster = data[pos : pos + size]
    if len(raster) != size:
        raise ValueError(f"raster truncated: expected {size} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic, h, w = b"P5", *arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, h, w = b"P6", arr.shape[0], arr.shape[1]
    elif arr.ndim == 3 and arr.shape[2] == 1:
        return encode(arr[:, :, 0])
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(arr).tobytes()


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def write(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode(arr))


def to_bytes(grid: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float grid to uint8 (round half to even, clipped)."""
    return np.clip(np.rint(np.asarray(grid) * 255.0), 0, 255).astype(np.uint8)


def from_bytes(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Read a PPM/PGM as a float64 ``(H, W, C)`` grid in [0, 1]."""
    arr = from_bytes(read(path))
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_image(path, grid: np.ndarray) -> None:
    write(path, to_bytes(grid))


def read_labels(path) -> np.ndarray:
    arr = read(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: label maps must be PGM")
    return arr.astype(np.int64)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in one byte")
    write(path, labels.astype(np.uint8))
