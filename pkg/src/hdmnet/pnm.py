"""Binary portable anymap I/O: P6 colour images and P5 greyscale maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with rounding."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a [3 x H x W] image in [0, 1] as P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3 x H x W], got {img.shape}")
    Image.fromarray(to_bytes(img.transpose(1, 2, 0))).save(path, format="PPM")


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an [H x W] uint8 map as P5."""
    g = np.asarray(gray)
    if g.ndim != 2 or g.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 array, got {g.dtype} {g.shape}")
    Image.fromarray(g).save(path, format="PPM")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask as P5 with values 0 and 255."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def heatmap_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a flat map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return to_bytes((v - lo) / (hi - lo))


def read_pnm(path: str | Path) -> np.ndarray:
    """P5 -> [H x W] uint8, P6 -> [3 x H x W] uint8."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.transpose(2, 0, 1).copy() if arr.ndim == 3 else arr.copy()
