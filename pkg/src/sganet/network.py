"""Attention-gated density network on an Inception-v3 fully convolutional trunk.

The trunk keeps Inception-v3's stage layout and parameter names (so a
torchvision ``inception_v3`` state dict loads by name) with these changes:

* classifier (``avgpool``/``dropout``/``fc``) and ``AuxLogits`` are dropped;
* ``maxpool1`` and ``maxpool2`` are removed, giving stride 8 after ``Mixed_7a``;
* "valid" 3x3 convolutions and the stride-2 reductions are zero-padded by one
  pixel so every stage has an exact power-of-two stride (parameter shapes are
  unchanged);
* a 2x upsample is inserted before ``Mixed_7c``, so the last stage runs at 1/4;
* a 1x1 conv + sigmoid attention head reads the selected tap and gates every
  channel of the ``Mixed_7c`` output, and a 1x1 conv regresses density.

Attention taps (``attention_input``):

=============  ==========================================
penultimate    ``upsample`` output, i.e. upsampled ``Mixed_7b``
last           ``Mixed_7c`` output (the map that is gated)
=============  ==========================================

The ``micro`` backbone is the same graph with every channel count multiplied
by ``width_multiplier``.

Passing ``valid=(h, w)`` to ``forward`` zeroes every activation outside the
top-left ``h x w`` region before each spatial operation, which is what a
tensor of exactly that size would see through zero padding. Outputs inside
the region then do not depend on how much padding was added.
"""

from __future__ import annotations

import contextvars
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "NetworkSpec",
    "SGANet",
    "build",
    "forward",
    "pad_to_stride",
    "save_checkpoint",
    "load_checkpoint",
    "load_pretrained",
    "IncompatibleWeightsError",
    "OUTPUT_STRIDE",
    "INPUT_MULTIPLE",
    "ATTENTION_TAPS",
]

OUTPUT_STRIDE = 4
INPUT_MULTIPLE = 32
ATTENTION_TAPS = {"penultimate": "upsample", "last": "Mixed_7c"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# (h, w, H, W): valid input region and padded input size of the current forward
_valid_region = contextvars.ContextVar("valid_region", default=None)


def _valid_extent(x):
    region = _valid_region.get()
    if region is None:
        return None
    h, w, H, _ = region
    stride = H // x.shape[-2]
    vh, vw = -(-h // stride), -(-w // stride)
    if vh >= x.shape[-2] and vw >= x.shape[-1]:
        return None
    return vh, vw


def _mask(x):
    extent = _valid_extent(x)
    if extent is None:
        return x
    vh, vw = extent
    return F.pad(x[..., :vh, :vw], (0, x.shape[-1] - vw, 0, x.shape[-2] - vh))


def _replicate_edge(x):
    # bilinear upsampling clamps at a tensor edge; mimic that at the region edge
    extent = _valid_extent(x)
    if extent is None:
        return x
    vh, vw = extent
    pad = (0, x.shape[-1] - vw, 0, x.shape[-2] - vh)
    return F.pad(x[..., :vh, :vw], pad, mode="replicate")


class IncompatibleWeightsError(ValueError):
    pass


@dataclass
class NetworkSpec:
    backbone: str = "micro"
    width_multiplier: float = 0.125
    attention_input: str = "penultimate"
    upsample_mode: str = "bilinear"
    pretrained_weights: Optional[str] = None
    freeze_bn: bool = False
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if self.backbone not in ("inception_v3_full", "micro"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.attention_input not in ATTENTION_TAPS:
            raise ValueError(f"attention_input must be one of {sorted(ATTENTION_TAPS)}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"upsample_mode must be 'bilinear' or 'nearest'")
        if self.backbone == "micro" and not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        if self.pretrained_weights and self.backbone != "inception_v3_full":
            raise IncompatibleWeightsError(
                "pretrained weights are only supported for the inception_v3_full backbone"
            )
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std must be 3 per-channel values with std > 0")

    @property
    def width(self):
        return 1.0 if self.backbone == "inception_v3_full" else float(self.width_multiplier)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


class BasicConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, **kwargs):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, bias=False, **kwargs)
        self.bn = nn.BatchNorm2d(out_channels, eps=0.001)

    def forward(self, x):
        return _mask(F.relu(self.bn(self.conv(x)), inplace=True))


class PoolProjection(BasicConv2d):
    """3x3 average pool followed by a 1x1 BasicConv2d, computed conv-first.

    Zero-padded average pooling and a bias-free 1x1 conv commute, so projecting
    first pools far fewer channels for the same output.
    """

    def forward(self, x):
        x = F.avg_pool2d(self.conv(x), kernel_size=3, stride=1, padding=1)
        return _mask(F.relu(self.bn(x), inplace=True))


class _Scaled:
    def __init__(self, width):
        self.width = width

    def __call__(self, channels):
        if self.width == 1.0:
            return channels
        return max(2, int(round(channels * self.width)))


class InceptionA(nn.Module):
    def __init__(self, in_channels, pool_features, c):
        super().__init__()
        self.branch1x1 = BasicConv2d(in_channels, c(64), kernel_size=1)
        self.branch5x5_1 = BasicConv2d(in_channels, c(48), kernel_size=1)
        self.branch5x5_2 = BasicConv2d(c(48), c(64), kernel_size=5, padding=2)
        self.branch3x3dbl_1 = BasicConv2d(in_channels, c(64), kernel_size=1)
        self.branch3x3dbl_2 = BasicConv2d(c(64), c(96), kernel_size=3, padding=1)
        self.branch3x3dbl_3 = BasicConv2d(c(96), c(96), kernel_size=3, padding=1)
        self.branch_pool = PoolProjection(in_channels, c(pool_features), kernel_size=1)
        self.out_channels = c(64) + c(64) + c(96) + c(pool_features)

    def forward(self, x):
        b1 = self.branch1x1(x)
        b5 = self.branch5x5_2(self.branch5x5_1(x))
        b3 = self.branch3x3dbl_3(self.branch3x3dbl_2(self.branch3x3dbl_1(x)))
        bp = self.branch_pool(x)
        return torch.cat([b1, b5, b3, bp], 1)


class InceptionB(nn.Module):
    def __init__(self, in_channels, c):
        super().__init__()
        self.branch3x3 = BasicConv2d(in_channels, c(384), kernel_size=3, stride=2, padding=1)
        self.branch3x3dbl_1 = BasicConv2d(in_channels, c(64), kernel_size=1)
        self.branch3x3dbl_2 = BasicConv2d(c(64), c(96), kernel_size=3, padding=1)
        self.branch3x3dbl_3 = BasicConv2d(c(96), c(96), kernel_size=3, stride=2, padding=1)
        self.out_channels = c(384) + c(96) + in_channels

    def forward(self, x):
        b3 = self.branch3x3(x)
        bd = self.branch3x3dbl_3(self.branch3x3dbl_2(self.branch3x3dbl_1(x)))
        bp = F.max_pool2d(x, kernel_size=3, stride=2, padding=1)
        return torch.cat([b3, bd, bp], 1)


class InceptionC(nn.Module):
    def __init__(self, in_channels, channels_7x7, c):
        super().__init__()
        c7 = c(channels_7x7)
        self.branch1x1 = BasicConv2d(in_channels, c(192), kernel_size=1)
        self.branch7x7_1 = BasicConv2d(in_channels, c7, kernel_size=1)
        self.branch7x7_2 = BasicConv2d(c7, c7, kernel_size=(1, 7), padding=(0, 3))
        self.branch7x7_3 = BasicConv2d(c7, c(192), kernel_size=(7, 1), padding=(3, 0))
        self.branch7x7dbl_1 = BasicConv2d(in_channels, c7, kernel_size=1)
        self.branch7x7dbl_2 = BasicConv2d(c7, c7, kernel_size=(7, 1), padding=(3, 0))
        self.branch7x7dbl_3 = BasicConv2d(c7, c7, kernel_size=(1, 7), padding=(0, 3))
        self.branch7x7dbl_4 = BasicConv2d(c7, c7, kernel_size=(7, 1), padding=(3, 0))
        self.branch7x7dbl_5 = BasicConv2d(c7, c(192), kernel_size=(1, 7), padding=(0, 3))
        self.branch_pool = PoolProjection(in_channels, c(192), kernel_size=1)
        self.out_channels = 4 * c(192)

    def forward(self, x):
        b1 = self.branch1x1(x)
        b7 = self.branch7x7_3(self.branch7x7_2(self.branch7x7_1(x)))
        bd = self.branch7x7dbl_1(x)
        for layer in (self.branch7x7dbl_2, self.branch7x7dbl_3, self.branch7x7dbl_4, self.branch7x7dbl_5):
            bd = layer(bd)
        bp = self.branch_pool(x)
        return torch.cat([b1, b7, bd, bp], 1)


class InceptionD(nn.Module):
    def __init__(self, in_channels, c):
        super().__init__()
        self.branch3x3_1 = BasicConv2d(in_channels, c(192), kernel_size=1)
        self.branch3x3_2 = BasicConv2d(c(192), c(320), kernel_size=3, stride=2, padding=1)
        self.branch7x7x3_1 = BasicConv2d(in_channels, c(192), kernel_size=1)
        self.branch7x7x3_2 = BasicConv2d(c(192), c(192), kernel_size=(1, 7), padding=(0, 3))
        self.branch7x7x3_3 = BasicConv2d(c(192), c(192), kernel_size=(7, 1), padding=(3, 0))
        self.branch7x7x3_4 = BasicConv2d(c(192), c(192), kernel_size=3, stride=2, padding=1)
        self.out_channels = c(320) + c(192) + in_channels

    def forward(self, x):
        b3 = self.branch3x3_2(self.branch3x3_1(x))
        b7 = self.branch7x7x3_1(x)
        for layer in (self.branch7x7x3_2, self.branch7x7x3_3, self.branch7x7x3_4):
            b7 = layer(b7)
        bp = F.max_pool2d(x, kernel_size=3, stride=2, padding=1)
        return torch.cat([b3, b7, bp], 1)


class InceptionE(nn.Module):
    def __init__(self, in_channels, c):
        super().__init__()
        self.branch1x1 = BasicConv2d(in_channels, c(320), kernel_size=1)
        self.branch3x3_1 = BasicConv2d(in_channels, c(384), kernel_size=1)
        self.branch3x3_2a = BasicConv2d(c(384), c(384), kernel_size=(1, 3), padding=(0, 1))
        self.branch3x3_2b = BasicConv2d(c(384), c(384), kernel_size=(3, 1), padding=(1, 0))
        self.branch3x3dbl_1 = BasicConv2d(in_channels, c(448), kernel_size=1)
        self.branch3x3dbl_2 = BasicConv2d(c(448), c(384), kernel_size=3, padding=1)
        self.branch3x3dbl_3a = BasicConv2d(c(384), c(384), kernel_size=(1, 3), padding=(0, 1))
        self.branch3x3dbl_3b = BasicConv2d(c(384), c(384), kernel_size=(3, 1), padding=(1, 0))
        self.branch_pool = PoolProjection(in_channels, c(192), kernel_size=1)
        self.out_channels = c(320) + 4 * c(384) + c(192)

    def forward(self, x):
        b1 = self.branch1x1(x)
        b3 = self.branch3x3_1(x)
        b3 = torch.cat([self.branch3x3_2a(b3), self.branch3x3_2b(b3)], 1)
        bd = self.branch3x3dbl_2(self.branch3x3dbl_1(x))
        bd = torch.cat([self.branch3x3dbl_3a(bd), self.branch3x3dbl_3b(bd)], 1)
        bp = self.branch_pool(x)
        return torch.cat([b1, b3, bd, bp], 1)


class SGANet(nn.Module):
    """Inception-v3 FCN whose last stage is gated by a predicted foreground map.

    ``forward`` returns ``(density, attention)``, both ``(B, H/4, W/4)``.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.epoch = 0
        c = _Scaled(spec.width)

        self.Conv2d_1a_3x3 = BasicConv2d(3, c(32), kernel_size=3, stride=2, padding=1)
        self.Conv2d_2a_3x3 = BasicConv2d(c(32), c(32), kernel_size=3, padding=1)
        self.Conv2d_2b_3x3 = BasicConv2d(c(32), c(64), kernel_size=3, padding=1)
        self.Conv2d_3b_1x1 = BasicConv2d(c(64), c(80), kernel_size=1)
        self.Conv2d_4a_3x3 = BasicConv2d(c(80), c(192), kernel_size=3, padding=1)
        self.Mixed_5b = InceptionA(c(192), 32, c)
        self.Mixed_5c = InceptionA(self.Mixed_5b.out_channels, 64, c)
        self.Mixed_5d = InceptionA(self.Mixed_5c.out_channels, 64, c)
        self.Mixed_6a = InceptionB(self.Mixed_5d.out_channels, c)
        self.Mixed_6b = InceptionC(self.Mixed_6a.out_channels, 128, c)
        self.Mixed_6c = InceptionC(self.Mixed_6b.out_channels, 160, c)
        self.Mixed_6d = InceptionC(self.Mixed_6c.out_channels, 160, c)
        self.Mixed_6e = InceptionC(self.Mixed_6d.out_channels, 192, c)
        self.Mixed_7a = InceptionD(self.Mixed_6e.out_channels, c)
        self.Mixed_7b = InceptionE(self.Mixed_7a.out_channels, c)
        self.upsample = nn.Upsample(
            scale_factor=2,
            mode=spec.upsample_mode,
            **({"align_corners": False} if spec.upsample_mode == "bilinear" else {}),
        )
        self.Mixed_7c = InceptionE(self.Mixed_7b.out_channels, c)

        tap_channels = (
            self.Mixed_7b.out_channels
            if spec.attention_input == "penultimate"
            else self.Mixed_7c.out_channels
        )
        self.attention = nn.Conv2d(tap_channels, 1, kernel_size=1)
        self.density = nn.Conv2d(self.Mixed_7c.out_channels, 1, kernel_size=1)

        self.register_buffer("mean", torch.tensor(spec.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(spec.std).view(1, 3, 1, 1), persistent=False)

        self._stem = [
            self.Conv2d_1a_3x3, self.Conv2d_2a_3x3, self.Conv2d_2b_3x3,
            self.Conv2d_3b_1x1, self.Conv2d_4a_3x3,
            self.Mixed_5b, self.Mixed_5c, self.Mixed_5d,
            self.Mixed_6a, self.Mixed_6b, self.Mixed_6c, self.Mixed_6d, self.Mixed_6e,
            self.Mixed_7a, self.Mixed_7b,
        ]  # fmt: skip

        if spec.freeze_bn:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    for p in m.parameters():
                        p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        if self.spec.freeze_bn:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def features(self, x):
        """Return ``(penultimate, last)``: upsampled ``Mixed_7b`` and ``Mixed_7c`` outputs."""
        x = _mask((x - self.mean) / self.std)
        for stage in self._stem:
            x = _mask(stage(x))
        penultimate = _mask(self.upsample(_replicate_edge(x)))
        last = _mask(self.Mixed_7c(penultimate))
        return penultimate, last

    def forward(self, x, attention=None, gate=True, valid=None):
        """``attention`` overrides the predicted map (B x h x w); ``gate=False`` skips gating.

        ``valid=(h, w)`` marks the unpadded image region, see the module notes.
        """
        H, W = x.shape[-2:]
        if H % INPUT_MULTIPLE or W % INPUT_MULTIPLE:
            raise ValueError(
                f"input {H}x{W} is not divisible by {INPUT_MULTIPLE}; use pad_to_stride first"
            )
        token = None
        if valid is not None:
            h, w = valid
            if not (0 < h <= H and 0 < w <= W):
                raise ValueError(f"valid region {h}x{w} does not fit input {H}x{W}")
            token = _valid_region.set((h, w, H, W))
        try:
            penultimate, last = self.features(x)
        finally:
            if token is not None:
                _valid_region.reset(token)
        tap = penultimate if self.spec.attention_input == "penultimate" else last
        att = torch.sigmoid(self.attention(tap))
        if attention is not None:
            att = attention.reshape(att.shape).to(att.dtype)
        gated = last * att if gate else last
        density = self.density(gated)
        return density[:, 0], att[:, 0]


def build(spec: NetworkSpec) -> SGANet:
    model = SGANet(spec)
    if spec.pretrained_weights:
        load_pretrained(model, spec.pretrained_weights)
    return model


def _head_key(name):
    return name.split(".", 1)[0] in ("attention", "density")


def load_pretrained(model, path):
    """Copy backbone tensors from a torchvision-style Inception-v3 state dict.

    Keys absent from the file keep their fresh initialization and extra keys
    (``fc``, ``AuxLogits``) are ignored. Shape mismatches raise.
    """
    if model.spec.backbone != "inception_v3_full":
        raise IncompatibleWeightsError("pretrained weights require the inception_v3_full backbone")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    own = model.state_dict()
    mismatched = [
        f"{k}: file {tuple(state[k].shape)} vs model {tuple(v.shape)}"
        for k, v in own.items()
        if k in state and not _head_key(k) and tuple(state[k].shape) != tuple(v.shape)
    ]
    if mismatched:
        raise IncompatibleWeightsError(
            "weight file incompatible with network spec; mismatched layers:\n  "
            + "\n  ".join(mismatched)
        )
    matched = {k: state[k] for k in own if k in state and not _head_key(k)}
    if not matched:
        raise IncompatibleWeightsError(f"{path}: no layer names match the Inception-v3 backbone")
    model.load_state_dict(matched, strict=False)
    return sorted(set(own) - set(matched))


def forward(model, batch):
    """Functional wrapper: ``batch`` is B x 3 x H x W in [0, 1] (tensor or array)."""
    if not torch.is_tensor(batch):
        batch = torch.as_tensor(np.asarray(batch, dtype=np.float32))
    return model(batch)


def pad_to_stride(image, multiple=INPUT_MULTIPLE):
    """Zero-pad an H x W x 3 image on the right/bottom to the next ``multiple``."""
    if multiple <= 0:
        raise ValueError("multiple must be > 0")
    h, w = image.shape[:2]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad), (h, w)


def output_shape(h, w):
    return math.ceil(h / OUTPUT_STRIDE), math.ceil(w / OUTPUT_STRIDE)


def save_checkpoint(model, path):
    """``torch.save`` archive: ``{"spec": dict, "epoch": int, "state_dict": ...}``."""
    spec = model.spec.to_dict()
    spec["pretrained_weights"] = None
    torch.save({"spec": spec, "epoch": int(model.epoch), "state_dict": model.state_dict()}, path)
    return Path(path)


def load_checkpoint(path):
    archive = torch.load(path, map_location="cpu", weights_only=True)
    model = SGANet(NetworkSpec(**archive["spec"]))
    model.load_state_dict(archive["state_dict"])
    model.epoch = int(archive.get("epoch", 0))
    return model
