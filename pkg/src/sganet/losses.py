"""Density L2 loss, attention cross-entropy, and the pixel-level curriculum.

All reductions sum over pixels and average over the batch only, so the
magnitude grows with patch area; the default ``lambda_=20`` is calibrated
for that normalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

from ._validation import check_same_shape
from .maps import KernelSpec, peak_pooled_kernel_value

__all__ = [
    "CurriculumSchedule",
    "LossConfig",
    "LossTerms",
    "density_loss",
    "segmentation_loss",
    "combined_loss",
    "loss_terms",
    "threshold",
    "curriculum_weights",
    "curriculum_density_loss",
    "check_initial_threshold",
]


@dataclass(frozen=True)
class CurriculumSchedule:
    k: float = 1e-3
    b: float = 0.1

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"curriculum slope k must be >= 0, got {self.k}")
        if not self.b > 0:
            raise ValueError(f"curriculum offset b must be > 0, got {self.b}")


@dataclass
class LossConfig:
    lambda_: float = 20.0
    epsilon: float = 1e-7
    curriculum: Optional[CurriculumSchedule] = None

    def __post_init__(self):
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumSchedule(**self.curriculum)
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


class LossTerms(NamedTuple):
    density: torch.Tensor
    segmentation: torch.Tensor
    total: torch.Tensor
    threshold: Optional[float]


def _batch(x):
    # a single H x W map is treated as a batch of one
    return x.unsqueeze(0) if x.dim() == 2 else x


def density_loss(pred, gt):
    """``sum_i ||pred_i - gt_i||_F^2 / (2 N)``."""
    check_same_shape(pred, gt)
    pred, gt = _batch(pred), _batch(gt)
    return (pred - gt).pow(2).sum() / (2 * pred.shape[0])


def segmentation_loss(pred_att, gt_seg, epsilon=1e-7):
    """Binary cross-entropy summed over pixels, averaged over the batch."""
    check_same_shape(pred_att, gt_seg, ("pred_att", "gt_seg"))
    if pred_att.numel() and (pred_att.min() < 0 or pred_att.max() > 1):
        raise ValueError("attention predictions must lie in [0, 1] before clamping")
    pred_att, gt_seg = _batch(pred_att), _batch(gt_seg)
    p = pred_att.clamp(epsilon, 1 - epsilon)
    ll = gt_seg * torch.log(p) + (1 - gt_seg) * torch.log(1 - p)
    return -ll.sum() / pred_att.shape[0]


def threshold(epoch, sched):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return sched.k * epoch + sched.b


def curriculum_weights(gt_den, T):
    """``T / (max(gt - T, 0) + T)``: 1 on easy pixels, ``T / gt`` above the threshold."""
    if not T > 0:
        raise ValueError(f"threshold must be > 0, got {T}")
    if torch.is_tensor(gt_den):
        return T / ((gt_den - T).clamp_min(0) + T)
    gt_den = np.asarray(gt_den, dtype=np.float64)
    return T / (np.maximum(gt_den - T, 0.0) + T)


def curriculum_density_loss(pred, gt, W):
    """Density loss with per-pixel weights ``W`` (treated as a constant)."""
    check_same_shape(pred, gt)
    if not torch.is_tensor(W):
        W = torch.as_tensor(W, dtype=pred.dtype)
    check_same_shape(pred, W, ("pred", "W"))
    pred, gt, W = _batch(pred), _batch(gt), _batch(W.detach())
    return (W * (pred - gt)).pow(2).sum() / (2 * pred.shape[0])


def loss_terms(pred_den, gt_den, pred_att, gt_seg, config, epoch=0):
    seg = segmentation_loss(pred_att, gt_seg, config.epsilon)
    if config.curriculum is None:
        T = None
        den = density_loss(pred_den, gt_den)
    else:
        T = threshold(epoch, config.curriculum)
        # W is built per image from that image's own ground truth
        W = curriculum_weights(gt_den.detach(), T)
        den = curriculum_density_loss(pred_den, gt_den, W)
    return LossTerms(den, seg, den + config.lambda_ * seg, T)


def combined_loss(pred_den, gt_den, pred_att, gt_seg, config, epoch=0):
    return loss_terms(pred_den, gt_den, pred_att, gt_seg, config, epoch).total


def check_initial_threshold(sched, kernel=None, stride=4):
    """Warn when ``b`` is below the peak of a single isolated head at ``stride``.

    Returns that peak value.
    """
    peak = peak_pooled_kernel_value(kernel or KernelSpec(), stride)
    if sched.b < peak:
        warnings.warn(
            f"curriculum b={sched.b:g} is below the peak density of a single head "
            f"({peak:.4f} at stride {stride}); isolated heads will be down-weighted",
            stacklevel=2,
        )
    return peak
