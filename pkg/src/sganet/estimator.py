"""scikit-learn compatible wrappers.

``SupervisionMaps`` turns annotations into supervision rasters (a transformer)
and ``SGANetCounter`` trains the network and predicts per-image counts (a
regressor), so both compose with ``clone``, ``GridSearchCV`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.metrics import mean_absolute_error
from sklearn.utils.validation import check_is_fitted

from .annotations import ImageRecord, PointAnnotationSet, resize_capped
from .evaluator import predict_count
from .losses import CurriculumSchedule, LossConfig
from .maps import KernelSpec, density_map, segmentation_map, sum_pool
from .network import NetworkSpec
from .trainer import TrainConfig, train

__all__ = ["SupervisionMaps", "SGANetCounter", "check_records"]


def check_records(X, allow_annotations=False):
    """Coerce ``X`` into a list of ImageRecord (or PointAnnotationSet) instances."""
    allowed = (ImageRecord, PointAnnotationSet) if allow_annotations else (ImageRecord,)
    if isinstance(X, allowed):
        X = [X]
    X = list(X)
    for i, item in enumerate(X):
        if not isinstance(item, allowed):
            names = " or ".join(t.__name__ for t in allowed)
            raise TypeError(f"X[{i}] is {type(item).__name__}, expected {names}")
    return X


class SupervisionMaps(TransformerMixin, BaseEstimator):
    """Rasterize point annotations into density or segmentation targets.

    Parameters
    ----------
    kind : {"density", "segmentation"}
    sigma, kernel_size, box_size : kernel geometry
    stride : int
        Sum-pooling factor applied after rasterization.
    """

    def __init__(self, kind="density", sigma=4.0, kernel_size=15, box_size=25, stride=1):
        self.kind = kind
        self.sigma = sigma
        self.kernel_size = kernel_size
        self.box_size = box_size
        self.stride = stride

    def fit(self, X=None, y=None):
        if self.kind not in ("density", "segmentation"):
            raise ValueError(f"kind must be 'density' or 'segmentation', got {self.kind!r}")
        self.kernel_ = KernelSpec(self.sigma, self.kernel_size, self.box_size)
        return self

    def transform(self, X):
        check_is_fitted(self, "kernel_")
        out = []
        for item in check_records(X, allow_annotations=True):
            ann = item.annotations if isinstance(item, ImageRecord) else item
            raster = (density_map if self.kind == "density" else segmentation_map)(ann, self.kernel_)
            out.append(sum_pool(raster, self.stride) if self.stride > 1 else raster)
        return out


class SGANetCounter(RegressorMixin, BaseEstimator):
    """Train the attention-gated density network on point-annotated images.

    ``fit`` takes a list of ImageRecord (targets come from their annotations);
    ``predict`` returns one float count per image. ``curriculum`` is either
    ``None`` or a ``(k, b)`` pair for the threshold schedule.
    """

    def __init__(
        self,
        backbone="micro",
        width_multiplier=0.125,
        attention_input="penultimate",
        upsample_mode="bilinear",
        pretrained_weights=None,
        sigma=4.0,
        kernel_size=15,
        box_size=25,
        patch_size=128,
        images_per_batch=8,
        patches_per_image=4,
        flip_prob=0.5,
        lr_initial=1e-4,
        lr_decay=0.5,
        lr_step=50,
        max_epochs=500,
        lambda_=20.0,
        curriculum=None,
        max_side=2048,
        seed=0,
    ):
        self.backbone = backbone
        self.width_multiplier = width_multiplier
        self.attention_input = attention_input
        self.upsample_mode = upsample_mode
        self.pretrained_weights = pretrained_weights
        self.sigma = sigma
        self.kernel_size = kernel_size
        self.box_size = box_size
        self.patch_size = patch_size
        self.images_per_batch = images_per_batch
        self.patches_per_image = patches_per_image
        self.flip_prob = flip_prob
        self.lr_initial = lr_initial
        self.lr_decay = lr_decay
        self.lr_step = lr_step
        self.max_epochs = max_epochs
        self.lambda_ = lambda_
        self.curriculum = curriculum
        self.max_side = max_side
        self.seed = seed

    def _network_spec(self):
        return NetworkSpec(
            backbone=self.backbone,
            width_multiplier=self.width_multiplier,
            attention_input=self.attention_input,
            upsample_mode=self.upsample_mode,
            pretrained_weights=self.pretrained_weights,
        )

    def _train_config(self):
        curriculum = None if self.curriculum is None else CurriculumSchedule(*self.curriculum)
        return TrainConfig(
            patch_size=self.patch_size,
            images_per_batch=self.images_per_batch,
            patches_per_image=self.patches_per_image,
            flip_prob=self.flip_prob,
            lr_initial=self.lr_initial,
            lr_decay=self.lr_decay,
            lr_step=self.lr_step,
            max_epochs=self.max_epochs,
            seed=self.seed,
            loss=LossConfig(lambda_=self.lambda_, curriculum=curriculum),
            kernel=KernelSpec(self.sigma, self.kernel_size, self.box_size),
            max_side=self.max_side,
        )

    def _capped(self, records):
        if not self.max_side:
            return records
        return [resize_capped(r, self.max_side) for r in records]

    def fit(self, X, y=None):
        records = check_records(X)
        if not records:
            raise ValueError("fit requires at least one image")
        self.model_, self.training_log_ = train(records, self._network_spec(), self._train_config())
        self.n_epochs_ = self.model_.epoch
        return self

    def predict_maps(self, X):
        """Return ``(density, attention)`` map pairs at stride 4, one per image."""
        check_is_fitted(self, "model_")
        return [predict_count(self.model_, r)[:2] for r in self._capped(check_records(X))]

    def predict(self, X):
        check_is_fitted(self, "model_")
        records = self._capped(check_records(X))
        return np.array([predict_count(self.model_, r)[2] for r in records], dtype=np.float64)

    def score(self, X, y=None, sample_weight=None):
        """R^2 of predicted counts; ``y`` defaults to the annotated counts."""
        records = check_records(X)
        if y is None:
            y = np.array([r.count for r in records], dtype=np.float64)
        return super().score(records, y, sample_weight=sample_weight)

    def mae(self, X):
        records = check_records(X)
        y = np.array([r.count for r in records], dtype=np.float64)
        return float(mean_absolute_error(y, self.predict(records)))
