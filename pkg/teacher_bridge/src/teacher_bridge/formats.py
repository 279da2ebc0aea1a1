"""Standalone writers for the featfield dataset formats.

The bridge talks to the engine only through bytes on disk, so the format
knowledge is duplicated here on purpose: .fmap is magic "FMAP", u32 version,
u32 H, u32 W, u32 D, then H*W*D little-endian float32 row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


def write_fmap(path, arr: np.ndarray):
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("feature maps must be (H, W, D)")
    h, w, d = a.shape
    Path(path).write_bytes(
        FMAP_MAGIC + struct.pack("<IIII", FMAP_VERSION, h, w, d) + a.tobytes())


def write_queries(path, teacher: str, dim: int, labels: dict):
    payload = {"teacher": teacher, "dim": int(dim),
               "labels": {k: np.asarray(v, dtype=float).tolist()
                          for k, v in labels.items()}}
    Path(path).write_text(json.dumps(payload))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned separable bilinear resize for (H, W, C) arrays."""
    ih, iw = img.shape[:2]
    if (ih, iw) == (out_h, out_w):
        return np.array(img, copy=True)
    ys = np.linspace(0.0, ih - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, iw - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(ih - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(iw - 2, 0))
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    wy = (ys - y0).reshape(-1, 1, 1)
    wx = (xs - x0).reshape(1, -1, 1)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)
