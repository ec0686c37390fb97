"""Minimal 8-bit greyscale PNG writer; enough for heat maps."""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["write_png_gray", "array_to_gray"]


def array_to_gray(values: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """Scale a 2-D array to uint8, black = vmin, white = vmax."""
    values = np.asarray(values, dtype=np.float64)
    lo = np.min(values) if vmin is None else vmin
    hi = np.max(values) if vmax is None else vmax
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo)
    return (np.clip(scaled, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png_gray(path, image: np.ndarray):
    """Write a (rows, cols) uint8 array as a greyscale PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("expected a 2-D uint8 array")
    rows, cols = image.shape
    header = struct.pack(">IIBBBBB", cols, rows, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + image[r].tobytes() for r in range(rows))
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_chunk(b"IHDR", header))
        fh.write(_chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(_chunk(b"IEND", b""))
