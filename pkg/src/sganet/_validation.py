"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np


def check_positive_int(value, name, *, odd=False):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    if odd and value % 2 == 0:
        raise ValueError(f"{name} must be odd, got {value}")
    return int(value)


def check_probability(value, name):
    if not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_range(pair, name, *, minimum=None):
    lo, hi = pair
    if lo > hi:
        raise ValueError(f"{name} must satisfy min <= max, got {pair!r}")
    if minimum is not None and lo < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {pair!r}")
    return lo, hi


def check_points(points, width, height, image_id=""):
    """Return points as an (N, 2) float64 array, raising on out-of-bounds entries.

    Bounds are half-open: ``0 <= x < width`` and ``0 <= y < height``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"{image_id}: points must have shape (N, 2), got {pts.shape}")
    bad = ~(
        np.isfinite(pts).all(axis=1)
        & (pts[:, 0] >= 0)
        & (pts[:, 0] < width)
        & (pts[:, 1] >= 0)
        & (pts[:, 1] < height)
    )
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"out-of-bounds point in image {image_id!r} at index {idx}: "
            f"{tuple(pts[idx])} not in [0, {width}) x [0, {height})"
        )
    return pts


def check_image(pixels, name="image"):
    """Validate an H x W x 3 raster with values in [0, 1]; returns float32."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, names=("pred", "gt")):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}"
        )
