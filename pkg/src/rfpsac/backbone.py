"""Toy bottom-up bottleneck backbone with per-stage feedback injection.

Every stage halves the spatial size; the first block of each stage owns the
downsampling stride, a projection shortcut, and a zero-initialized 1x1
injection convolution that adds transformed pyramid feedback to the block's
residual sum.  Because the injection starts at zero, a freshly built (or
freshly converted) backbone ignores feedback entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .ops import ConvParams, add, conv2d, relu, _join
from .sac import SacConv, convert_conv_to_sac, sac_forward
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    stages: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 2
    stem_channels: int = 16
    in_channels: int = 1
    feedback_channels: int = 64

    def __post_init__(self):
        if self.stages < 1 or len(self.channels) != self.stages:
            raise ConfigError(
                f"need one channel width per stage: {self.stages} stages, {self.channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError("each stage needs at least one block")
        if min(self.channels) < 4 or self.stem_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel widths are too small")
        if self.feedback_channels < 1:
            raise ConfigError("feedback width must be positive")


def apply_conv(layer, x: Tensor) -> Tensor:
    if isinstance(layer, SacConv):
        return sac_forward(layer, x)
    return conv2d(x, layer)


class Block:
    """Bottleneck: 1x1 reduce, 3x3 (SAC-convertible), 1x1 expand, shortcut."""

    def __init__(self, reduce: ConvParams, conv3x3, expand: ConvParams,
                 shortcut: ConvParams | None):
        self.reduce = reduce
        self.conv3x3 = conv3x3
        self.expand = expand
        self.shortcut = shortcut

    @classmethod
    def create(cls, c_in: int, c_out: int, stride: int, rng: np.random.Generator,
               dtype=None) -> "Block":
        mid = max(c_out // 4, 4)
        reduce = ConvParams.create(c_in, mid, 1, rng, dtype=dtype)
        conv3x3 = ConvParams.create(mid, mid, 3, rng, stride=stride, padding=1, dtype=dtype)
        # small expand gain keeps the residual branch from inflating the
        # shortcut signal block after block (no normalization layers here)
        expand = ConvParams.create(mid, c_out, 1, rng, gain=0.25, dtype=dtype)
        shortcut = None
        if stride != 1 or c_in != c_out:
            shortcut = ConvParams.create(c_in, c_out, 1, rng, gain=1.0, stride=stride, dtype=dtype)
        return cls(reduce, conv3x3, expand, shortcut)

    def forward(self, x: Tensor, extra: Tensor | None = None) -> Tensor:
        r = relu(conv2d(x, self.reduce))
        r = relu(apply_conv(self.conv3x3, r))
        r = conv2d(r, self.expand)
        s = conv2d(x, self.shortcut) if self.shortcut is not None else x
        y = add(r, s)
        if extra is not None:
            y = add(y, extra)
        return relu(y)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.reduce.named_parameters(_join(prefix, "reduce"))
        yield from self.conv3x3.named_parameters(_join(prefix, "conv3x3"))
        yield from self.expand.named_parameters(_join(prefix, "expand"))
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters(_join(prefix, "shortcut"))


class Stage:
    def __init__(self, blocks: list[Block], injection: ConvParams):
        self.blocks = blocks
        self.injection = injection

    @classmethod
    def create(cls, c_in: int, c_out: int, n_blocks: int, feedback_channels: int,
               rng: np.random.Generator, dtype=None) -> "Stage":
        blocks = [Block.create(c_in, c_out, stride=2, rng=rng, dtype=dtype)]
        for _ in range(n_blocks - 1):
            blocks.append(Block.create(c_out, c_out, stride=1, rng=rng, dtype=dtype))
        injection = ConvParams.zero_init(feedback_channels, c_out, k=1, dtype=dtype)
        return cls(blocks, injection)

    def forward(self, x: Tensor, feedback: Tensor | None = None) -> Tensor:
        extra = conv2d(feedback, self.injection) if feedback is not None else None
        out = self.blocks[0].forward(x, extra)
        for block in self.blocks[1:]:
            out = block.forward(out)
        return out

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(_join(prefix, f"blocks/{j}"))
        yield from self.injection.named_parameters(_join(prefix, "injection"))


class Backbone:
    def __init__(self, stem, stages: list[Stage], config: BackboneConfig):
        self.stem = stem
        self.stages = stages
        self.config = config

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator, dtype=None) -> "Backbone":
        stem = ConvParams.create(config.in_channels, config.stem_channels, 3, rng,
                                 stride=2, padding=1, dtype=dtype)
        stages = []
        c_prev = config.stem_channels
        for c_out in config.channels:
            stages.append(Stage.create(c_prev, c_out, config.blocks_per_stage,
                                       config.feedback_channels, rng, dtype=dtype))
            c_prev = c_out
        return cls(stem, stages, config)

    @property
    def is_converted(self) -> bool:
        return isinstance(self.stem, SacConv)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.stem.named_parameters(_join(prefix, "stem"))
        for i, stage in enumerate(self.stages):
            yield from stage.named_parameters(_join(prefix, f"stages/{i}"))

    def sac_layers(self, prefix: str = "") -> Iterator[tuple[str, SacConv]]:
        if isinstance(self.stem, SacConv):
            yield _join(prefix, "stem"), self.stem
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks):
                if isinstance(block.conv3x3, SacConv):
                    yield _join(prefix, f"stages/{i}/blocks/{j}/conv3x3"), block.conv3x3


def backbone_forward(b: Backbone, x: Tensor, feedback: Sequence[Tensor] | None = None
                     ) -> list[Tensor]:
    """Stage outputs x_1..x_S; feedback, when given, carries one tensor per
    stage (pyramid width, stage output size) and is injected into the first
    block of its stage."""
    if x.c != b.config.in_channels:
        raise DimensionError(f"backbone expects {b.config.in_channels} input channels, got {x.c}")
    if feedback is not None and len(feedback) != len(b.stages):
        raise DimensionError(
            f"feedback needs one entry per stage ({len(b.stages)}), got {len(feedback)}")
    h = relu(apply_conv(b.stem, x))
    outs: list[Tensor] = []
    for i, stage in enumerate(b.stages):
        h = stage.forward(h, feedback[i] if feedback is not None else None)
        outs.append(h)
    return outs


def convert_backbone_to_sac(b: Backbone, rate: int = 3) -> Backbone:
    """Return a new backbone whose 3x3 convolutions (stem included) are SAC.

    1x1 reduce/expand/shortcut/injection layers are copied untouched.  The
    source backbone keeps its own parameters; outputs of the two models match
    exactly until training diverges them.
    """
    if b.is_converted:
        raise UsageError("backbone is already SAC-converted")
    stem = convert_conv_to_sac(b.stem, rate=rate)
    stages = []
    for stage in b.stages:
        blocks = []
        for block in stage.blocks:
            if isinstance(block.conv3x3, SacConv):
                raise UsageError("backbone is already SAC-converted")
            blocks.append(Block(
                block.reduce.copy(),
                convert_conv_to_sac(block.conv3x3, rate=rate),
                block.expand.copy(),
                None if block.shortcut is None else block.shortcut.copy()))
        stages.append(Stage(blocks, stage.injection.copy()))
    return Backbone(stem, stages, b.config)
