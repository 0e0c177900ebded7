"""Whole-image inference, MAE/RMSE, k-fold splits, and overlay rendering."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .annotations import resize_capped
from .maps import DensityMap, SegmentationMap, count_of, density_map
from .network import INPUT_MULTIPLE, output_shape, pad_to_stride

__all__ = [
    "EvalReport",
    "predict_count",
    "mae",
    "rmse",
    "kfold_splits",
    "folds_from_file",
    "evaluate",
    "render_overlays",
    "panel_titles",
    "config_digest",
]


@dataclass
class EvalReport:
    per_image: list = field(default_factory=list)
    mae: float = 0.0
    rmse: float = 0.0
    config_digest: str = ""

    @classmethod
    def from_pairs(cls, per_image, digest=""):
        pairs = [(y, y_hat) for _, y, y_hat in per_image]
        return cls(list(per_image), mae(pairs), rmse(pairs), digest)

    def to_dict(self):
        return {
            "per_image": [
                {"image_id": i, "y": float(y), "y_hat": float(y_hat)} for i, y, y_hat in self.per_image
            ],
            "mae": self.mae,
            "rmse": self.rmse,
            "config_digest": self.config_digest,
        }

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text())
        per_image = [(e["image_id"], e["y"], e["y_hat"]) for e in d["per_image"]]
        return cls(per_image, d["mae"], d["rmse"], d.get("config_digest", ""))


def _check_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.size == 0:
        raise ValueError("at least one (y, y_hat) pair is required")
    return pairs.reshape(-1, 2)


def mae(pairs):
    p = _check_pairs(pairs)
    return float(np.mean(np.abs(p[:, 0] - p[:, 1])))


def rmse(pairs):
    p = _check_pairs(pairs)
    return float(np.sqrt(np.mean((p[:, 0] - p[:, 1]) ** 2)))


def kfold_splits(ids, k=5, seed=0):
    """Seeded shuffle into ``k`` near-equal folds; returns ``[(train_ids, test_ids), ...]``."""
    ids = list(ids)
    if not isinstance(k, int) or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k!r}")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    splits = []
    for i, test in enumerate(folds):
        test_set = set(test.tolist())
        train = [ids[j] for j in range(len(ids)) if j not in test_set]
        splits.append((train, [ids[j] for j in sorted(test_set)]))
    return splits


def folds_from_file(path, ids):
    """Read a fixed partition: a JSON list of test-fold id lists.

    Returns the same ``[(train_ids, test_ids), ...]`` shape as ``kfold_splits``
    and rejects files that are not a partition of ``ids``.
    """
    ids = list(ids)
    folds = json.loads(Path(path).read_text())
    if not isinstance(folds, list) or len(folds) < 2 or not all(isinstance(f, list) for f in folds):
        raise ValueError(f"{path}: expected a list of at least two id lists")
    seen = [i for fold in folds for i in fold]
    if len(seen) != len(set(seen)):
        raise ValueError(f"{path}: folds overlap")
    if set(seen) != set(ids):
        missing, extra = set(ids) - set(seen), set(seen) - set(ids)
        raise ValueError(f"{path}: folds do not cover the ids (missing {sorted(missing)[:5]}, unknown {sorted(extra)[:5]})")
    return [([i for i in ids if i not in set(fold)], list(fold)) for fold in folds]


def predict_count(model, record, attention=None, multiple=INPUT_MULTIPLE):
    """Pad to ``multiple``, run the network on the masked image, crop back, and sum.

    The padding never reaches the cropped outputs, so the count does not depend
    on ``multiple``. Returns ``(DensityMap, SegmentationMap, count)`` at stride 4.
    """
    if multiple % INPUT_MULTIPLE:
        raise ValueError(f"multiple must be divisible by {INPUT_MULTIPLE}")
    padded, (h, w) = pad_to_stride(record.pixel_data, multiple)
    x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1)))[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            den, att = model(x, attention=attention, valid=(h, w))
    finally:
        model.train(was_training)
    oh, ow = output_shape(h, w)
    den = den[0, :oh, :ow].numpy().astype(np.float64)
    att = att[0, :oh, :ow].numpy().astype(np.float64)
    density = DensityMap(den, stride=4)
    return density, SegmentationMap(att, stride=4, binary=False), count_of(density)


def config_digest(model):
    h = hashlib.sha256(json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    h.update(str(model.epoch).encode())
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def evaluate(model, dataset, max_side=None, out=None):
    """Count every image in ``dataset`` and aggregate MAE/RMSE.

    ``max_side`` applies the same aspect-preserving resize cap used for training.
    """
    per_image = []
    for rec in dataset:
        if max_side:
            rec = resize_capped(rec, max_side)
        _, _, y_hat = predict_count(model, rec)
        per_image.append((rec.image_id, float(rec.count), float(y_hat)))
    report = EvalReport.from_pairs(per_image, config_digest(model))
    if out is not None:
        report.write(out)
    return report


def panel_titles(record, gt_count, pred_count):
    return [
        f"input: {record.image_id}",
        f"GT density (count {gt_count:.1f})",
        f"predicted density (count {pred_count:.1f})",
        "predicted attention",
    ]


def render_overlays(record, density, attention, out_dir, kernel=None):
    """Write one four-panel PNG: input, GT density, predicted density, attention."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt = density_map(record.annotations, kernel)
    titles = panel_titles(record, count_of(gt), count_of(density))
    fig, axes = plt.subplots(1, 4, figsize=(16, 4.4))
    axes[0].imshow(record.pixel_data)
    axes[1].imshow(gt.values, cmap="jet")
    axes[2].imshow(density.values, cmap="jet")
    att = attention.values if isinstance(attention, SegmentationMap) else np.asarray(attention)
    axes[3].imshow(att, cmap="gray", vmin=0.0, vmax=1.0)
    for ax, title in zip(axes, titles):
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    stem = Path(record.image_id).stem or "image"
    path = out_dir / f"{stem}_overlay.png"
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
