"""Patch-sampling training loop with a step learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from ._validation import check_positive_int, check_probability
from .annotations import ImageRecord, resize_capped
from .losses import LossConfig, check_initial_threshold, loss_terms
from .maps import (
    DensityMap,
    KernelSpec,
    SegmentationMap,
    density_map,
    segmentation_map,
    sum_pool,
)
from .network import INPUT_MULTIPLE, OUTPUT_STRIDE, build, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainingBatch",
    "PreparedImage",
    "NonFiniteLossError",
    "prepare",
    "sample_batch",
    "lr_at",
    "iterations_per_epoch",
    "train_step",
    "train",
]

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, batch_index, term, value):
        super().__init__(
            f"non-finite {term} loss ({value}) at epoch {epoch}, batch {batch_index}"
        )
        self.epoch = epoch
        self.batch_index = batch_index
        self.term = term


@dataclass
class TrainConfig:
    patch_size: int = 128
    images_per_batch: int = 8
    patches_per_image: int = 4
    flip_prob: float = 0.5
    lr_initial: float = 1e-4
    lr_decay: float = 0.5
    lr_step: int = 50
    max_epochs: int = 500
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    checkpoint_every: int = 0
    pad_small: bool = True
    max_side: Optional[int] = 2048

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec(**self.kernel)
        check_positive_int(self.patch_size, "patch_size")
        if self.patch_size % INPUT_MULTIPLE:
            raise ValueError(f"patch_size must be divisible by {INPUT_MULTIPLE}")
        check_positive_int(self.images_per_batch, "images_per_batch")
        check_positive_int(self.patches_per_image, "patches_per_image")
        check_probability(self.flip_prob, "flip_prob")
        check_positive_int(self.lr_step, "lr_step")
        if self.max_epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("max_epochs and checkpoint_every must be >= 0")

    @property
    def batch_size(self):
        return self.images_per_batch * self.patches_per_image


class PreparedImage(NamedTuple):
    record: ImageRecord
    density: np.ndarray
    segmentation: np.ndarray


@dataclass(eq=False)
class TrainingBatch:
    patches: np.ndarray
    gt_density: np.ndarray
    gt_segmentation: np.ndarray
    # (dataset index, row, col, flipped) per patch, for congruence checks
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.patches)


def prepare(records, kernel=None):
    """Attach full-resolution density and segmentation ground truth to each record."""
    kernel = kernel or KernelSpec()
    return [
        PreparedImage(
            rec,
            density_map(rec.annotations, kernel).values,
            segmentation_map(rec.annotations, kernel).values,
        )
        for rec in records
    ]


def _pad_to_patch(item, size, pad_small):
    h, w = item.record.shape
    if h >= size and w >= size:
        return item.record.pixel_data, item.density, item.segmentation
    if not pad_small:
        raise ValueError(
            f"image {item.record.image_id!r} is {w}x{h}, smaller than patch size {size}"
        )
    ph, pw = max(size - h, 0), max(size - w, 0)
    # reflect-pad pixels, zero-pad supervision so no mass is invented
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pixels = np.pad(item.record.pixel_data, ((0, ph), (0, pw), (0, 0)), mode=mode)
    den = np.pad(item.density, ((0, ph), (0, pw)))
    seg = np.pad(item.segmentation, ((0, ph), (0, pw)))
    return pixels, den, seg


def sample_batch(dataset, config, rng):
    """Draw ``images_per_batch`` images, crop ``patches_per_image`` patches from each.

    Images are drawn without replacement within a batch (with replacement only
    when the dataset is smaller than a batch). Ground truth is sum-pooled to the
    network's output stride and flipped together with its patch.
    """
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    P = config.patch_size
    n = len(dataset)
    chosen = rng.choice(n, size=config.images_per_batch, replace=n < config.images_per_batch)

    patches, dens, segs, origins = [], [], [], []
    for idx in chosen:
        pixels, den, seg = _pad_to_patch(dataset[idx], P, config.pad_small)
        h, w = den.shape
        for _ in range(config.patches_per_image):
            r = int(rng.integers(0, h - P + 1))
            c = int(rng.integers(0, w - P + 1))
            flip = bool(rng.random() < config.flip_prob)
            img = pixels[r : r + P, c : c + P]
            d = sum_pool(DensityMap(den[r : r + P, c : c + P]), OUTPUT_STRIDE).values
            s = sum_pool(SegmentationMap(seg[r : r + P, c : c + P]), OUTPUT_STRIDE).values
            if flip:
                img, d, s = img[:, ::-1], d[:, ::-1], s[:, ::-1]
            patches.append(img.transpose(2, 0, 1))
            dens.append(d)
            segs.append(s)
            origins.append((int(idx), r, c, flip))
    return TrainingBatch(
        np.ascontiguousarray(np.stack(patches), dtype=np.float32),
        np.ascontiguousarray(np.stack(dens), dtype=np.float32),
        np.ascontiguousarray(np.stack(segs), dtype=np.float32),
        origins,
    )


def lr_at(epoch, config):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr_initial * config.lr_decay ** (epoch // config.lr_step)


def iterations_per_epoch(n_images, config):
    return max(1, math.ceil(n_images / config.images_per_batch))


def _to_tensors(batch):
    return (
        torch.from_numpy(batch.patches),
        torch.from_numpy(batch.gt_density),
        torch.from_numpy(batch.gt_segmentation),
    )


def train_step(model, optimizer, batch, loss_config, epoch=0, batch_index=0):
    """One Adam step on ``batch``; returns the loss terms as floats."""
    x, gt_den, gt_seg = _to_tensors(batch)
    pred_den, pred_att = model(x)
    terms = loss_terms(pred_den, gt_den, pred_att, gt_seg, loss_config, epoch)
    for name, value in (
        ("density", terms.density),
        ("segmentation", terms.segmentation),
        ("total", terms.total),
    ):
        if not torch.isfinite(value):
            raise NonFiniteLossError(epoch, batch_index, name, value.item())
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    optimizer.step()
    return (
        terms.density.item(),
        terms.segmentation.item(),
        terms.total.item(),
        terms.threshold,
    )


def train(dataset, spec, config, out_dir=None, model=None):
    """Train from scratch (or continue ``model``); returns ``(model, log)``.

    One epoch is ``ceil(len(dataset) / images_per_batch)`` batches. When
    ``out_dir`` is given, a JSON-lines log and checkpoints are written there.
    """
    if dataset and isinstance(dataset[0], ImageRecord):
        if config.max_side:
            dataset = [resize_capped(r, config.max_side) for r in dataset]
        dataset = prepare(dataset, config.kernel)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build(spec)
    if config.loss.curriculum is not None:
        check_initial_threshold(config.loss.curriculum, config.kernel, OUTPUT_STRIDE)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=lr_at(0, config))
    steps = iterations_per_epoch(len(dataset), config)
    log = []
    try:
        for epoch in range(config.max_epochs):
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            sums = np.zeros(3)
            T = None
            for b in range(steps):
                batch = sample_batch(dataset, config, rng)
                *values, T = train_step(model, optimizer, batch, config.loss, epoch, b)
                sums += values
            model.epoch = epoch + 1
            mean = sums / steps
            record = {
                "epoch": epoch,
                "T": T,
                "density_loss": float(mean[0]),
                "seg_loss": float(mean[1]),
                "total": float(mean[2]),
                "lr": lr,
            }
            log.append(record)
            logger.info("epoch %d: %s", epoch, record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save_checkpoint(model, out_dir / f"checkpoint_{epoch + 1:04d}.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.pt")
    return model, log
