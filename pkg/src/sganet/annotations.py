"""Point-annotated crowd images: manifest I/O, synthetic generation, resizing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_image, check_points, check_positive_int, check_range

__all__ = [
    "PointAnnotationSet",
    "ImageRecord",
    "SynthConfig",
    "load_annotations",
    "save_annotations",
    "synth_generate",
    "resize_capped",
    "read_image",
]

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass(eq=False)
class PointAnnotationSet:
    """Head coordinates for one image, ``(x, y) = (column, row)`` with origin top-left."""

    image_id: str
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.width = check_positive_int(self.width, "width")
        self.height = check_positive_int(self.height, "height")
        self.points = check_points(self.points, self.width, self.height, self.image_id)

    def __len__(self):
        return len(self.points)

    @property
    def count(self):
        return len(self.points)


@dataclass(eq=False)
class ImageRecord:
    image_id: str
    pixel_data: np.ndarray
    annotations: PointAnnotationSet

    def __post_init__(self):
        self.pixel_data = check_image(self.pixel_data, self.image_id)
        h, w = self.pixel_data.shape[:2]
        if (h, w) != (self.annotations.height, self.annotations.width):
            raise ValueError(
                f"{self.image_id}: raster is {w}x{h} but annotations declare "
                f"{self.annotations.width}x{self.annotations.height}"
            )

    @property
    def shape(self):
        return self.pixel_data.shape[:2]

    @property
    def count(self):
        return self.annotations.count


@dataclass
class SynthConfig:
    num_images: int = 10
    image_size: tuple = (128, 128)
    count_range: tuple = (10, 30)
    head_radius_range: tuple = (3.0, 5.0)
    background_noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.count_range = tuple(int(v) for v in self.count_range)
        self.head_radius_range = tuple(float(v) for v in self.head_radius_range)
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        check_range(self.count_range, "count_range", minimum=0)
        check_range(self.head_radius_range, "head_radius_range", minimum=0.5)
        if self.background_noise_level < 0:
            raise ValueError("background_noise_level must be >= 0")
        h, w = self.image_size
        check_positive_int(h, "image height")
        check_positive_int(w, "image width")
        diameter = 2 * self.head_radius_range[1]
        if min(h, w) < diameter:
            raise ValueError(
                f"infeasible config: image {h}x{w} cannot contain a head of diameter {diameter}"
            )
        disk_area = math.pi * self.head_radius_range[0] ** 2
        if self.count_range[1] * disk_area > h * w:
            raise ValueError(
                f"infeasible config: {self.count_range[1]} heads of radius "
                f">= {self.head_radius_range[0]} cannot fit in {h}x{w}"
            )


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_annotations(path):
    """Load a JSON manifest of ``{"image": relpath, "points": [[x, y], ...]}`` entries.

    Image paths are resolved relative to the manifest's directory; the image
    path string doubles as ``image_id``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ValueError(f"malformed manifest {path}: top level must be a JSON array")

    records = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "image" not in entry or "points" not in entry:
            raise ValueError(f"malformed manifest {path}: entry {i} needs 'image' and 'points'")
        rel = entry["image"]
        image_path = path.parent / rel
        if not image_path.is_file():
            raise FileNotFoundError(f"image not found for entry {i}: {image_path}")
        pixels = read_image(image_path)
        h, w = pixels.shape[:2]
        ann = PointAnnotationSet(rel, w, h, entry["points"])
        records.append(ImageRecord(rel, pixels, ann))
    return records


def save_annotations(records, out_dir, manifest_name="manifest.json"):
    """Write PNGs plus a manifest under ``out_dir``; returns the manifest path.

    Pixel data is quantized to 8 bits; point coordinates are stored exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        rel = rec.image_id
        if Path(rel).suffix.lower() not in _IMAGE_SUFFIXES:
            rel = f"{rel}.png"
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        quantized = np.clip(np.rint(rec.pixel_data * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(quantized).save(target)
        entries.append({"image": rel, "points": rec.annotations.points.tolist()})
    manifest = out_dir / manifest_name
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def _render_synth_image(rng, config, index):
    h, w = config.image_size
    n_heads = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    rmin, rmax = config.head_radius_range

    background = rng.uniform(0.15, 0.45)
    tint = rng.uniform(-0.05, 0.05, size=3)
    img = np.full((h, w, 3), background, dtype=np.float64) + tint
    # low-frequency clutter so the background is not flat
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(0.02, 0.08, size=2)
    img += 0.06 * (np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1]))[..., None]
    img += rng.normal(0.0, config.background_noise_level, size=img.shape)

    head_luma = background + rng.uniform(0.3, 0.5)
    radii = rng.uniform(rmin, rmax, size=n_heads)
    xs = rng.uniform(radii, w - radii)
    ys = rng.uniform(radii, h - radii)
    for x, y, r in zip(xs, ys, radii):
        lum = head_luma + rng.uniform(-0.05, 0.05)
        x0, x1 = max(int(x - r - 1), 0), min(int(x + r + 2), w)
        y0, y1 = max(int(y - r - 1), 0), min(int(y + r + 2), h)
        # pixel (i, j) is centred on integer coordinates, same as the rasterizers
        dist = np.hypot(xx[y0:y1, x0:x1] - x, yy[y0:y1, x0:x1] - y)
        coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)[..., None]
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - coverage) + lum * coverage

    # quantize to 8 bits so saved PNGs reload bit-exactly
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
    image_id = f"synth_{index:05d}"
    ann = PointAnnotationSet(image_id, w, h, np.stack([xs, ys], axis=1))
    return ImageRecord(image_id, img, ann)


def synth_generate(config):
    """Deterministically render ``config.num_images`` synthetic crowd images."""
    rng = np.random.default_rng(config.seed)
    return [_render_synth_image(rng, config, i) for i in range(config.num_images)]


def resize_capped(record, max_side=2048):
    """Downscale so the longer side is at most ``max_side``, keeping aspect ratio."""
    check_positive_int(max_side, "max_side")
    h, w = record.shape
    if max(h, w) <= max_side:
        return record
    scale = max_side / max(h, w)
    new_w = max(1, int(round(w * scale)))
    new_h = max(1, int(round(h * scale)))
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(record.pixel_data[..., c])).resize(
                (new_w, new_h), Image.BILINEAR
            )
        )
        for c in range(3)
    ]
    pixels = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    pts = record.annotations.points * scale
    # rounding the raster size can shave the last fraction of a pixel
    if len(pts):
        pts[:, 0] = np.minimum(pts[:, 0], np.nextafter(new_w, 0))
        pts[:, 1] = np.minimum(pts[:, 1], np.nextafter(new_h, 0))
    ann = PointAnnotationSet(record.image_id, new_w, new_h, pts)
    return ImageRecord(record.image_id, pixels, ann)

