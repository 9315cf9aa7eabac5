"""Dense depth / correction grids and their binary file format.

Binary grid layout (little endian)::

    8 bytes   magic  b"PSGRID1\\0"
    uint32    width
    uint32    height
    float64   width*height values, row-major (invalid cells written as 0.0)
    uint8     ceil(width*height / 8) bytes of validity bits (np.packbits order)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DatasetError

MAGIC = b"PSGRID1\0"


@dataclass
class DenseDepthMap:
    """Per-pixel ray range in metres; NaN marks pixels where depth is undefined."""

    depth: np.ndarray

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self):
        return np.isfinite(self.depth)

    def at(self, pixels):
        """Depth at continuous pixel coordinates (floor lookup); NaN if undefined."""
        px = np.asarray(pixels, dtype=float).reshape(-1, 2)
        cols = np.clip(np.floor(px[:, 0]).astype(np.int64), 0, self.width - 1)
        rows = np.clip(np.floor(px[:, 1]).astype(np.int64), 0, self.height - 1)
        return self.depth[rows, cols]


@dataclass
class CorrectionMap:
    delta: np.ndarray

    @property
    def height(self):
        return self.delta.shape[0]

    @property
    def width(self):
        return self.delta.shape[1]


def write_grid(path, values, valid=None):
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("grid must be two-dimensional")
    if valid is None:
        valid = np.isfinite(values)
    h, w = values.shape
    body = np.where(valid, values, 0.0).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(body.tobytes(order="C"))
        fh.write(np.packbits(valid.reshape(-1).astype(np.uint8)).tobytes())


def read_grid(path):
    """Returns (values with NaN at invalid cells, validity mask)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(path, f"cannot read grid: {exc.strerror}") from exc
    if raw[:8] != MAGIC or len(raw) < 16:
        raise DatasetError(path, "not a binary depth grid (bad magic)")
    w, h = struct.unpack("<II", raw[8:16])
    n = w * h
    need = 16 + 8 * n + (n + 7) // 8
    if len(raw) != need:
        raise DatasetError(path, f"grid size mismatch: expected {need} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", count=n, offset=16).reshape(h, w).astype(float)
    bits = np.frombuffer(raw, dtype=np.uint8, offset=16 + 8 * n)
    valid = np.unpackbits(bits)[:n].astype(bool).reshape(h, w)
    vals = np.where(valid, vals, np.nan)
    return vals, valid


def save_depth_map(path, dmap: DenseDepthMap):
    write_grid(path, dmap.depth)


def load_depth_map(path) -> DenseDepthMap:
    vals, _ = read_grid(path)
    return DenseDepthMap(vals)
