"""Density-regression crowd counting with an attention gate and threshold-weighted loss."""

from .annotations import (
    ImageRecord,
    PointAnnotationSet,
    SynthConfig,
    load_annotations,
    resize_capped,
    save_annotations,
    synth_generate,
)
from .estimator import SGANetCounter, SupervisionMaps
from .evaluator import EvalReport, evaluate, kfold_splits, mae, predict_count, rmse
from .losses import (
    CurriculumSchedule,
    LossConfig,
    combined_loss,
    curriculum_density_loss,
    curriculum_weights,
    density_loss,
    segmentation_loss,
    threshold,
)
from .maps import (
    DensityMap,
    KernelSpec,
    SegmentationMap,
    count_of,
    density_map,
    segmentation_map,
    sum_pool,
)
from .network import NetworkSpec, SGANet, build, pad_to_stride
from .trainer import TrainConfig, lr_at, sample_batch, train

__version__ = "0.1.0"
