"""Density / segmentation supervision rasters and the DMAP cache format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive_int

__all__ = [
    "KernelSpec",
    "DensityMap",
    "SegmentationMap",
    "gaussian_kernel",
    "density_map",
    "segmentation_map",
    "sum_pool",
    "count_of",
    "write_dmap",
    "read_dmap",
    "peak_pooled_kernel_value",
]

DMAP_MAGIC = b"DMAP"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class KernelSpec:
    sigma: float = 4.0
    kernel_size: int = 15
    box_size: int = 25

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        check_positive_int(self.kernel_size, "kernel_size", odd=True)
        check_positive_int(self.box_size, "box_size", odd=True)


@dataclass(eq=False)
class DensityMap:
    values: np.ndarray
    stride: int = 1

    @property
    def shape(self):
        return self.values.shape

    def count(self):
        return count_of(self)


@dataclass(eq=False)
class SegmentationMap:
    """Binary ground truth (``binary=True``) or a predicted map in [0, 1]."""

    values: np.ndarray
    stride: int = 1
    binary: bool = True

    @property
    def shape(self):
        return self.values.shape


def gaussian_kernel(sigma=4.0, size=15):
    """Truncated ``size x size`` Gaussian renormalized to unit sum (float64)."""
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _round_points(points, width, height):
    # ties go toward +inf; a point in [w - 0.5, w) would round onto the border
    cols = np.minimum(np.floor(points[:, 0] + 0.5).astype(np.int64), width - 1)
    rows = np.minimum(np.floor(points[:, 1] + 0.5).astype(np.int64), height - 1)
    return rows, cols


def _stamp(out, patch, row, col):
    """Add ``patch`` centred at (row, col) into ``out``, clipping at the borders."""
    h, w = out.shape
    half_r, half_c = patch.shape[0] // 2, patch.shape[1] // 2
    r0, r1 = row - half_r, row + half_r + 1
    c0, c1 = col - half_c, col + half_c + 1
    pr0, pc0 = max(0, -r0), max(0, -c0)
    pr1 = patch.shape[0] - max(0, r1 - h)
    pc1 = patch.shape[1] - max(0, c1 - w)
    out[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] += patch[pr0:pr1, pc0:pc1]


def density_map(ann, kernel=None, dtype=np.float64):
    """Stamp one normalized Gaussian per annotated head; border mass is lost."""
    kernel = kernel or KernelSpec()
    g = gaussian_kernel(kernel.sigma, kernel.kernel_size)
    out = np.zeros((ann.height, ann.width), dtype=np.float64)
    rows, cols = _round_points(ann.points, ann.width, ann.height)
    for r, c in zip(rows, cols):
        _stamp(out, g, r, c)
    return DensityMap(out.astype(dtype, copy=False), stride=1)


def segmentation_map(ann, kernel=None):
    """Union of ``box_size x box_size`` boxes around the annotations, clipped."""
    kernel = kernel or KernelSpec()
    out = np.zeros((ann.height, ann.width), dtype=np.float32)
    half = kernel.box_size // 2
    rows, cols = _round_points(ann.points, ann.width, ann.height)
    for r, c in zip(rows, cols):
        out[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1] = 1.0
    return SegmentationMap(out, stride=1, binary=True)


def _block_reduce(values, factor, reducer):
    h, w = values.shape
    if h % factor or w % factor:
        raise ValueError(
            f"map of shape {values.shape} is not divisible by pooling factor {factor}; pad first"
        )
    return reducer(values.reshape(h // factor, factor, w // factor, factor), axis=(1, 3))


def sum_pool(m, factor):
    """Non-overlapping block sum.

    Ground-truth segmentation maps are re-binarized after summing; predicted
    segmentation maps are pooled with block max so they stay in [0, 1].
    """
    factor = check_positive_int(factor, "factor")
    if isinstance(m, DensityMap):
        return DensityMap(_block_reduce(m.values, factor, np.sum), m.stride * factor)
    if isinstance(m, SegmentationMap):
        if m.binary:
            pooled = (_block_reduce(m.values, factor, np.sum) > 0).astype(m.values.dtype)
        else:
            pooled = _block_reduce(m.values, factor, np.max)
        return SegmentationMap(pooled, m.stride * factor, m.binary)
    raise TypeError(f"expected DensityMap or SegmentationMap, got {type(m).__name__}")


def count_of(m):
    """Sum of all density values. Negative pixels are not clamped."""
    values = m.values if isinstance(m, DensityMap) else np.asarray(m)
    return float(np.sum(values, dtype=np.float64))


def peak_pooled_kernel_value(kernel=None, stride=4):
    """Largest pixel a single isolated head can produce after sum-pooling by ``stride``.

    Maximized over the ``stride x stride`` sub-block alignments of the head.
    """
    kernel = kernel or KernelSpec()
    g = gaussian_kernel(kernel.sigma, kernel.kernel_size)
    half = kernel.kernel_size // 2
    size = -(-(kernel.kernel_size + stride) // stride) * stride
    best = 0.0
    for dr in range(stride):
        for dc in range(stride):
            canvas = np.zeros((size, size))
            _stamp(canvas, g, half + dr, half + dc)
            best = max(best, _block_reduce(canvas, stride, np.sum).max())
    return float(best)


def write_dmap(path, m):
    """Write a raster as ``DMAP`` + u32 height, width, stride + float32 LE row-major."""
    values = np.asarray(m.values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("DMAP rasters must be 2-D")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DMAP_MAGIC, h, w, int(m.stride)))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_dmap(path, kind="density"):
    """Read a DMAP file as a DensityMap or (binary) SegmentationMap."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated DMAP header")
    magic, h, w, stride = _HEADER.unpack_from(data)
    if magic != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).copy()
    if kind == "density":
        return DensityMap(values, stride)
    if kind == "segmentation":
        return SegmentationMap(values, stride, binary=bool(np.isin(values, (0.0, 1.0)).all()))
    raise ValueError(f"unknown kind {kind!r}")
