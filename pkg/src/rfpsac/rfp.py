"""Feature pyramid, ASPP connector, attention fusion, and the unrolled
recursive pyramid that ties them to a feedback-capable backbone."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .backbone import Backbone, backbone_forward
from .errors import ConfigError, DimensionError
from .ops import ConvParams, add, concat_channels, conv2d, global_avg_pool, mul, relu, sigmoid, sub, upsample, _join
from .tensor import Tensor


class Fpn:
    """Top-down pyramid: per-level 1x1 laterals into a shared width, 2x
    bilinear upsampling of the coarser level, 3x3 output convolutions."""

    def __init__(self, laterals: list[ConvParams], outputs: list[ConvParams], width: int):
        if len(laterals) != len(outputs):
            raise ConfigError("one lateral and one output conv per pyramid level")
        self.laterals = laterals
        self.outputs = outputs
        self.width = width

    @property
    def levels(self) -> int:
        return len(self.laterals)

    @classmethod
    def create(cls, in_channels: Sequence[int], width: int, rng: np.random.Generator,
               dtype=None) -> "Fpn":
        laterals = [ConvParams.create(c, width, 1, rng, gain=1.0, dtype=dtype)
                    for c in in_channels]
        outputs = [ConvParams.create(width, width, 3, rng, gain=1.0, padding=1, dtype=dtype)
                   for _ in in_channels]
        return cls(laterals, outputs, width)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, lat in enumerate(self.laterals):
            yield from lat.named_parameters(_join(prefix, f"lateral/{i}"))
        for i, out in enumerate(self.outputs):
            yield from out.named_parameters(_join(prefix, f"output/{i}"))

    def copy(self) -> "Fpn":
        return Fpn([c.copy() for c in self.laterals], [c.copy() for c in self.outputs],
                   self.width)


def fpn_forward(fpn: Fpn, xs: Sequence[Tensor]) -> list[Tensor]:
    """Combine stage features top-down; the level above the top is zero."""
    if len(xs) != fpn.levels:
        raise DimensionError(f"expected {fpn.levels} stage features, got {len(xs)}")
    s = len(xs)
    merged: list[Tensor | None] = [None] * s
    merged[s - 1] = conv2d(xs[s - 1], fpn.laterals[s - 1])
    for i in range(s - 2, -1, -1):
        lat = conv2d(xs[i], fpn.laterals[i])
        up = upsample(merged[i + 1], lat.h, lat.w, mode="bilinear")
        merged[i] = add(lat, up)
    return [conv2d(merged[i], fpn.outputs[i]) for i in range(s)]


_ASPP_BRANCHES = ((1, 1, 0), (3, 3, 3), (3, 6, 6))  # (kernel, rate, padding)


class AsppConnector:
    """Four parallel views of a pyramid feature, re-concatenated to full width.

    Three convolutional branches (1x1; 3x3 rate 3; 3x3 rate 6) plus a pooled
    global branch, each producing width/4 channels through a ReLU.  No
    post-concat convolution: the result feeds backbone stages, not a
    prediction head.
    """

    def __init__(self, branches: list[ConvParams], global_conv: ConvParams, width: int):
        self.branches = branches
        self.global_conv = global_conv
        self.width = width

    @classmethod
    def create(cls, width: int, rng: np.random.Generator, dtype=None) -> "AsppConnector":
        if width % 4 != 0:
            raise ConfigError(f"ASPP width must divide by 4, got {width}")
        quarter = width // 4
        branches = [
            ConvParams.create(width, quarter, k, rng, padding=pad, dilation=rate, dtype=dtype)
            for k, rate, pad in _ASPP_BRANCHES
        ]
        global_conv = ConvParams.create(width, quarter, 1, rng, dtype=dtype)
        return cls(branches, global_conv, width)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, br in enumerate(self.branches):
            yield from br.named_parameters(_join(prefix, f"branch/{i}"))
        yield from self.global_conv.named_parameters(_join(prefix, "global"))

    def copy(self) -> "AsppConnector":
        return AsppConnector([c.copy() for c in self.branches], self.global_conv.copy(),
                             self.width)


def aspp_connect(r: AsppConnector, f: Tensor) -> Tensor:
    if f.c != r.width:
        raise DimensionError(f"connector expects {r.width} channels, got {f.c}")
    outs = [relu(conv2d(f, br)) for br in r.branches]
    pooled = relu(conv2d(global_avg_pool(f), r.global_conv))
    outs.append(upsample(pooled, f.h, f.w, mode="broadcast"))
    return concat_channels(outs)


class FusionModule:
    """Sigmoid-gated convex blend of the previous and current pyramid features."""

    def __init__(self, attention: ConvParams):
        if attention.c_out != 1 or attention.k != 1:
            raise DimensionError("fusion attention needs a 1x1 conv with one output channel")
        self.attention = attention

    @classmethod
    def create(cls, width: int, rng: np.random.Generator, dtype=None) -> "FusionModule":
        return cls(ConvParams.create(width, 1, 1, rng, dtype=dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.attention.named_parameters(_join(prefix, "attention"))

    def copy(self) -> "FusionModule":
        return FusionModule(self.attention.copy())


def fuse_features(fu: FusionModule, f_prev: Tensor, f_new: Tensor) -> Tensor:
    """a*f_new + (1-a)*f_prev with a = sigmoid(attention(f_new)).

    Evaluated as f_prev + a*(f_new - f_prev): with equal inputs the update
    term is exactly zero, so fusing a feature with itself is the identity.
    """
    if f_prev.shape != f_new.shape:
        raise DimensionError(f"fusion inputs differ: {f_prev.shape} vs {f_new.shape}")
    a = sigmoid(conv2d(f_new, fu.attention))
    return add(f_prev, mul(a, sub(f_new, f_prev)))


class RfpModel:
    """T-step unrolled recursive pyramid.

    The pyramid and connector are single shared instances used at every step;
    backbones are per-step instances unless ``shared`` is set, in which case
    one backbone runs at every step.  ``aspp`` and ``fusion`` may be None
    when ``steps == 1`` (they never execute).
    """

    def __init__(self, backbones: Sequence[Backbone], fpn: Fpn,
                 aspp: AsppConnector | None, fusion: FusionModule | None,
                 steps: int, shared: bool = False):
        if steps < 1:
            raise ConfigError(f"unroll steps must be >= 1, got {steps}")
        expected = 1 if shared else steps
        if len(backbones) != expected:
            raise ConfigError(f"need {expected} backbone(s), got {len(backbones)}")
        if steps > 1 and (aspp is None or fusion is None):
            raise ConfigError("multi-step unrolling needs the connector and fusion modules")
        self.backbones = list(backbones)
        self.fpn = fpn
        self.aspp = aspp
        self.fusion = fusion
        self.steps = steps
        self.shared = shared

    def backbone_at(self, step: int) -> Backbone:
        return self.backbones[0] if self.shared else self.backbones[step]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, bb in enumerate(self.backbones):
            yield from bb.named_parameters(_join(prefix, f"backbone/{i}"))
        yield from self.fpn.named_parameters(_join(prefix, "fpn"))
        if self.aspp is not None:
            yield from self.aspp.named_parameters(_join(prefix, "aspp"))
        if self.fusion is not None:
            yield from self.fusion.named_parameters(_join(prefix, "fusion"))


def rfp_forward(m: RfpModel, image: Tensor) -> list[Tensor]:
    """Run the unrolled pipeline; returns the final (fused) pyramid.

    Step 1 sees zero feedback.  Later steps route each pyramid level through
    the connector into the matching backbone stage, then blend the new
    pyramid with the previous one level by level.
    """
    fs: list[Tensor] = []
    feedback: list[Tensor] | None = None
    for t in range(m.steps):
        xs = backbone_forward(m.backbone_at(t), image, feedback)
        new_fs = fpn_forward(m.fpn, xs)
        if t == 0:
            fs = new_fs
        else:
            fs = [fuse_features(m.fusion, prev, new) for prev, new in zip(fs, new_fs)]
        if t + 1 < m.steps:
            feedback = [aspp_connect(m.aspp, f) for f in fs]
    return fs
