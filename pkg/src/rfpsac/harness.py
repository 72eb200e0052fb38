"""Synthetic multi-scale dense-prediction task and training loop.

Scenes hold 1-4 axis-aligned squares/discs; each object is assigned to one
pyramid level by its radius and rasterized into that level's binary target
mask.  The model predicts one logit map per level through a shared 3x3 head;
the loss is the sum over levels of the mean binary cross-entropy.  Metrics
dump as ``step,loss`` lines plus a summary block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, convert_backbone_to_sac
from .errors import ConfigError, TrainingDiverged, UsageError
from .ops import ConvParams, add, bce_with_logits, conv2d, mul, _join
from .optim import SGD
from .rfp import AsppConnector, Fpn, FusionModule, RfpModel, rfp_forward
from .sac import SacConv, capture_switch_maps
from .tensor import Tensor, active_tape, backward, no_grad

LEVELS = 3
PYRAMID_WIDTH = 64
_MODEL_STREAM = 0x5EED


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "square" | "disc"
    cy: float
    cx: float
    radius: float
    level: int
    intensity: float


@dataclass
class SyntheticScene:
    image: Tensor                 # (1, c, size, size), values in [0, 1]
    masks: list[Tensor]           # per level: (1, 1, size/2^(i+2), size/2^(i+2)), {0,1}
    objects: list[SceneObject]


def _inside(obj: SceneObject, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    dy = ys - obj.cy
    dx = xs - obj.cx
    if obj.kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= obj.radius
    return dy * dy + dx * dx <= obj.radius * obj.radius


def _radius_bins(size: int, levels: int) -> list[tuple[float, float]]:
    base = size * 5.5 / 64.0
    return [(base * 2 ** i, base * 2 ** (i + 1)) for i in range(levels)]


def gen_dataset(seed: int, n: int, size: int, levels: int = LEVELS,
                channels: int = 1) -> list[SyntheticScene]:
    """Deterministic scene list; same seed, same bits."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if size % (2 ** (levels + 1)) != 0 or size < 2 ** (levels + 2):
        raise ConfigError(
            f"image size must be a multiple of {2 ** (levels + 1)} (and at least "
            f"{2 ** (levels + 2)}), got {size}")
    rng = np.random.default_rng(seed)
    bins = _radius_bins(size, levels)
    scenes = []
    for _ in range(n):
        objects = []
        for _ in range(int(rng.integers(1, 5))):
            level = int(rng.integers(0, levels))
            lo, hi = bins[level]
            radius = float(rng.uniform(lo, hi))
            margin = min(radius, size / 2 - 1)
            cy = float(rng.uniform(margin, size - margin))
            cx = float(rng.uniform(margin, size - margin))
            kind = "square" if rng.random() < 0.5 else "disc"
            intensity = float(rng.uniform(0.45, 1.0))
            objects.append(SceneObject(kind, cy, cx, radius, level, intensity))

        img = rng.uniform(0.0, 0.12, size=(1, channels, size, size))
        yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
        for obj in objects:
            img[0, :, _inside(obj, yy, xx)] = obj.intensity
        image = Tensor(img.astype(np.float32))

        masks = []
        for lvl in range(levels):
            cell = 2 ** (lvl + 2)
            g = size // cell
            cy_grid, cx_grid = np.meshgrid((np.arange(g) + 0.5) * cell,
                                           (np.arange(g) + 0.5) * cell, indexing="ij")
            m = np.zeros((g, g), dtype=np.float32)
            for obj in objects:
                if obj.level == lvl:
                    m[_inside(obj, cy_grid, cx_grid)] = 1.0
            masks.append(Tensor(m.reshape(1, 1, g, g)))
        scenes.append(SyntheticScene(image, masks, objects))
    return scenes


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 4
    steps_per_epoch: int = 50
    lr: float = 0.03
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (3,)
    use_sac: bool = False
    use_rfp: bool = False
    unroll_steps: int = 2
    shared_backbones: bool = False
    image_size: int = 64
    dataset_size: int = 16

    def __post_init__(self):
        checks = [
            (self.lr > 0, "lr must be > 0"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.steps_per_epoch >= 1, "steps_per_epoch must be >= 1"),
            (self.unroll_steps >= 1, "unroll_steps must be >= 1"),
            (self.dataset_size >= 1, "dataset_size must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass
class Metrics:
    losses: list[float] = field(default_factory=list)
    iou_per_level: list[list[float]] = field(default_factory=list)
    nan_step: int | None = None

    def moving_average(self, step: int, window: int = 50) -> float:
        """Mean loss over the ``window`` steps ending at ``step`` (1-based)."""
        if not 1 <= step <= len(self.losses):
            raise UsageError(f"step {step} outside recorded history of {len(self.losses)}")
        chunk = self.losses[max(0, step - window):step]
        return float(sum(chunk) / len(chunk))

    def to_text(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{v:.6f}" for i, v in enumerate(self.losses)]
        lines.append("# summary")
        lines.append(f"steps={len(self.losses)}")
        if self.losses:
            lines.append(f"final_loss={self.losses[-1]:.6f}")
            probe = min(20, len(self.losses))
            lines.append(f"ma50_at_{probe}={self.moving_average(probe):.6f}")
            lines.append(f"ma50_at_{len(self.losses)}={self.moving_average(len(self.losses)):.6f}")
        if self.iou_per_level:
            for lvl, v in enumerate(self.iou_per_level[-1]):
                lines.append(f"iou_level_{lvl}={v:.6f}")
        lines.append(f"nan_step={-1 if self.nan_step is None else self.nan_step}")
        return "\n".join(lines) + "\n"


class DensePredictor:
    """Unrolled pyramid plus one shared 3x3 prediction head (d -> 1 logit)."""

    def __init__(self, rfp: RfpModel, head: ConvParams):
        self.rfp = rfp
        self.head = head

    def forward(self, image: Tensor) -> list[Tensor]:
        return [conv2d(f, self.head) for f in rfp_forward(self.rfp, image)]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.rfp.named_parameters(_join(prefix, "rfp"))
        yield from self.head.named_parameters(_join(prefix, "head"))

    def sac_layers(self) -> list[tuple[str, SacConv]]:
        out = []
        for i, bb in enumerate(self.rfp.backbones):
            out.extend(bb.sac_layers(prefix=f"rfp/backbone/{i}"))
        return out

    def trainable_parameters(self) -> list[Tensor]:
        # injection convs only run where feedback arrives: never in a
        # single-step model, and never in the first step's own backbone
        return [t for name, t in self.named_parameters() if not self._injection_unused(name)]

    def _injection_unused(self, name: str) -> bool:
        if "/injection/" not in name:
            return False
        if self.rfp.steps == 1:
            return True
        return not self.rfp.shared and name.startswith("rfp/backbone/0/")

    def convert_to_sac(self, rate: int = 3) -> "DensePredictor":
        """Copy of the model with every backbone 3x3 conv converted to SAC."""
        rfp = self.rfp
        backbones = [convert_backbone_to_sac(bb, rate=rate) for bb in rfp.backbones]
        new_rfp = RfpModel(backbones, rfp.fpn.copy(),
                           None if rfp.aspp is None else rfp.aspp.copy(),
                           None if rfp.fusion is None else rfp.fusion.copy(),
                           steps=rfp.steps, shared=rfp.shared)
        return DensePredictor(new_rfp, self.head.copy())


def build_model(cfg: TrainConfig, dtype=None) -> DensePredictor:
    """Model for a config's variant flags, deterministically initialized."""
    rng = np.random.default_rng([cfg.seed, _MODEL_STREAM])
    bcfg = BackboneConfig(in_channels=1, feedback_channels=PYRAMID_WIDTH)
    steps = cfg.unroll_steps if cfg.use_rfp else 1
    n_backbones = 1 if (cfg.shared_backbones or steps == 1) else steps
    backbones = [Backbone.create(bcfg, rng, dtype=dtype) for _ in range(n_backbones)]
    fpn = Fpn.create(bcfg.channels, PYRAMID_WIDTH, rng, dtype=dtype)
    aspp = fusion = None
    if steps > 1:
        aspp = AsppConnector.create(PYRAMID_WIDTH, rng, dtype=dtype)
        fusion = FusionModule.create(PYRAMID_WIDTH, rng, dtype=dtype)
    head = ConvParams.create(PYRAMID_WIDTH, 1, 3, rng, gain=0.5, padding=1, dtype=dtype)
    shared = cfg.shared_backbones and steps > 1
    rfp = RfpModel(backbones, fpn, aspp, fusion, steps=steps, shared=shared)
    model = DensePredictor(rfp, head)
    if cfg.use_sac:
        model = model.convert_to_sac()
    return model


def scene_loss(model: DensePredictor, scene: SyntheticScene) -> Tensor:
    logits = model.forward(scene.image)
    loss = bce_with_logits(logits[0], scene.masks[0])
    for lg, mask in zip(logits[1:], scene.masks[1:]):
        loss = add(loss, bce_with_logits(lg, mask))
    return loss


# scenes averaged per optimizer step; smooths the heavy-momentum updates
# enough that the default schedule stays stable without normalization layers
BATCH_SCENES = 4


def train(cfg: TrainConfig) -> tuple[DensePredictor, Metrics]:
    """Run the schedule; raises TrainingDiverged (with .metrics) on NaN loss.

    Each step averages the loss of BATCH_SCENES consecutive scenes (cycling
    through the dataset in order, so runs are deterministic in the seed).
    """
    scenes = gen_dataset(cfg.seed, cfg.dataset_size, cfg.image_size)
    model = build_model(cfg)
    opt = SGD(model.trainable_parameters(), cfg.lr, cfg.momentum)
    metrics = Metrics()
    tape = active_tape()
    step = 0
    cursor = 0
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            opt.lr *= 0.1
        for _ in range(cfg.steps_per_epoch):
            tape.clear()
            loss = scene_loss(model, scenes[cursor % len(scenes)])
            cursor += 1
            for _ in range(BATCH_SCENES - 1):
                loss = add(loss, scene_loss(model, scenes[cursor % len(scenes)]))
                cursor += 1
            loss = mul(loss, 1.0 / BATCH_SCENES)
            value = loss.item()
            if not math.isfinite(value):
                tape.clear()
                metrics.nan_step = step
                err = TrainingDiverged(step)
                err.metrics = metrics
                raise err
            metrics.losses.append(value)
            backward(loss)
            opt.step()
            step += 1
        metrics.iou_per_level.append(evaluate(model, scenes).iou_per_level[0])
    tape.clear()
    return model, metrics


def evaluate(model: DensePredictor, scenes: Sequence[SyntheticScene]) -> Metrics:
    """Mean IoU per level at threshold 0; empty-vs-empty counts as 1."""
    if not scenes:
        raise UsageError("evaluate needs at least one scene")
    levels = len(scenes[0].masks)
    scores: list[list[float]] = [[] for _ in range(levels)]
    with no_grad():
        for scene in scenes:
            logits = model.forward(scene.image)
            for lvl, (lg, mask) in enumerate(zip(logits, scene.masks)):
                pred = lg.data > 0
                gt = mask.data > 0.5
                union = np.logical_or(pred, gt).sum()
                inter = np.logical_and(pred, gt).sum()
                scores[lvl].append(1.0 if union == 0 else float(inter / union))
    return Metrics(iou_per_level=[[float(np.mean(s)) for s in scores]])


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a float map; values clamp to [0, 1]."""
    px = np.rint(np.clip(gray, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM into floats in [0, 1]."""
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UsageError(f"{path}: truncated PGM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise UsageError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    if maxval < 1 or maxval > 255:
        raise UsageError(f"{path}: unsupported maxval {maxval}")
    if len(buf) - pos < w * h:
        raise UsageError(f"{path}: truncated PGM payload")
    px = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return px.astype(np.float64) / maxval


def export_switch_map(model: DensePredictor, image: Tensor, layer, path) -> None:
    """Write one SAC layer's switch map as a PGM (clamped to [0, 1]).

    ``layer`` is a layer path from ``model.sac_layers()`` or an integer index
    into that list.  When a layer runs several times (shared backbones), the
    map from the last unrolled step wins.
    """
    layers = model.sac_layers()
    if not layers:
        raise UsageError("model has no SAC layers to visualize")
    if isinstance(layer, int):
        name, target = layers[layer]
    else:
        matches = [(n, l) for n, l in layers if n == layer]
        if not matches:
            raise UsageError(f"no SAC layer named {layer!r}")
        name, target = matches[0]
    with no_grad(), capture_switch_maps() as caps:
        model.forward(image)
    smap = None
    for lay, s in caps:
        if lay is target:
            smap = s
    if smap is None:
        raise UsageError(f"layer {name!r} did not run in the forward pass")
    write_pgm(path, smap.data[0, 0])
