"""Image and depth-map file formats: 8/16-bit PNG and portable float maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "write_png",
    "read_png",
    "write_depth_png16",
    "write_pfm",
    "read_pfm",
]


def write_png(path, rgb: np.ndarray) -> None:
    """Save a float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]."""
    img = np.asarray(Image.open(path))
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    return img.astype(np.float64) / 255.0


def write_depth_png16(path, depth: np.ndarray, scale: float) -> None:
    """16-bit grayscale preview; stored value = depth * scale, clipped."""
    arr = np.clip(np.asarray(depth) * scale, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale portable float map, little-endian (negative scale)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())  # bottom-to-top rows


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float64)
