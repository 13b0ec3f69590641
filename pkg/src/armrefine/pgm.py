"""Binary greyscale (P5) images for masks and score maps."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def mask_view(mask: np.ndarray, classes: int) -> np.ndarray:
    """Spread class labels evenly over 0..255 so regions are visible."""
    step = 255 // max(classes - 1, 1)
    return (np.asarray(mask, dtype=np.int64) * step).astype(np.uint8)


def pixels_of(grid: np.ndarray) -> np.ndarray:
    """Integer grids are masks kept as-is; float grids are min-max scaled."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    if np.issubdtype(grid.dtype, np.integer) or grid.dtype == bool:
        labels = grid.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("mask values must lie in 0..255")
        return labels.astype(np.uint8)
    lo, hi = float(np.min(grid)), float(np.max(grid))
    span = hi - lo
    scaled = (grid - lo) / span if span > 0 else np.zeros(grid.shape)
    return np.rint(scaled * 255).astype(np.uint8)


def to_bytes(grid: np.ndarray) -> bytes:
    """Encode a 2-D grid as P5 with maxval 255."""
    pixels = pixels_of(grid)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(grid: np.ndarray, path) -> None:
    Path(path).write_bytes(to_bytes(grid))


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = int(m.group(1)), int(m.group(2))
    body = raw[m.end() :]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def side_by_side(*grids: np.ndarray, gap: int = 2) -> np.ndarray:
    """Place equally tall uint8 grids next to each other with a white gap."""
    h = grids[0].shape[0]
    spacer = np.full((h, gap), 255, dtype=np.uint8)
    parts = []
    for g in grids:
        parts += [g, spacer]
    return np.concatenate(parts[:-1], axis=1)
