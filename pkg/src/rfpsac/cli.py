"""Command-line front end: train/eval, checkpoint conversion with
verification, the gradient-check suite, and switch-map export.

Exit codes: 0 success, 2 usage/config problem, 3 numeric abort during
training, 4 conversion verification failure, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .checkpoint import load_checkpoint, load_state, save_checkpoint
from .errors import CheckpointError, ConfigError, TrainingDiverged, UsageError
from .harness import (TrainConfig, build_model, evaluate, export_switch_map, gen_dataset,
                      read_pgm, train)
from .tensor import Tensor, no_grad

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4
EXIT_GRADCHECK = 5

# 10x the accumulation error observed across the toy backbone depth in
# float32; forward outputs of a freshly converted model match far tighter.
VERIFY_TOLERANCE = 1e-5

_PATH_KEYS = ("checkpoint_in", "checkpoint_out", "output_dir")
_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} | set(_PATH_KEYS)


def load_config(path, seed_override: int | None = None) -> tuple[TrainConfig, dict]:
    """Strict JSON config: unknown keys are rejected by name."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"config parse error in {path} at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config root in {path} must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    paths = {k: doc.pop(k) for k in _PATH_KEYS if k in doc}
    if "lr_decay_epochs" in doc:
        doc["lr_decay_epochs"] = tuple(doc["lr_decay_epochs"])
    if seed_override is not None:
        doc["seed"] = seed_override
    try:
        cfg = TrainConfig(**doc)
    except TypeError as e:
        raise ConfigError(f"bad config value in {path}: {e}") from e
    return cfg, paths


def _default_config(seed_override: int | None) -> tuple[TrainConfig, dict]:
    cfg = TrainConfig() if seed_override is None else TrainConfig(seed=seed_override)
    return cfg, {}


def _config_from_args(args) -> tuple[TrainConfig, dict]:
    if args.config is not None:
        return load_config(args.config, args.seed)
    return _default_config(args.seed)


def cmd_train(args) -> int:
    cfg, paths = _config_from_args(args)
    out_dir = Path(args.out or paths.get("output_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        model, metrics = train(cfg)
    except TrainingDiverged as e:
        (out_dir / "metrics.txt").write_text(e.metrics.to_text())
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    (out_dir / "metrics.txt").write_text(metrics.to_text())
    save_checkpoint(model, out_dir / "model.rfpk")
    final_iou = " ".join(f"{v:.3f}" for v in metrics.iou_per_level[-1])
    print(f"trained {len(metrics.losses)} steps, final loss {metrics.losses[-1]:.4f}, "
          f"IoU per level [{final_iou}]")
    print(f"wrote {out_dir / 'metrics.txt'} and {out_dir / 'model.rfpk'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, paths = _config_from_args(args)
    ckpt_path = args.checkpoint or paths.get("checkpoint_in")
    if not ckpt_path:
        raise ConfigError("eval needs --checkpoint (or checkpoint_in in the config)")
    model = build_model(cfg)
    load_state(model, load_checkpoint(ckpt_path), strict=True)
    scenes = gen_dataset(cfg.seed, cfg.dataset_size, cfg.image_size)
    metrics = evaluate(model, scenes)
    for lvl, v in enumerate(metrics.iou_per_level[-1]):
        print(f"iou_level_{lvl}={v:.6f}")
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg, paths = _config_from_args(args)
    src = args.input or paths.get("checkpoint_in")
    dst = args.output or paths.get("checkpoint_out")
    if not src or not dst:
        raise ConfigError("convert needs input and output checkpoint paths")
    plain_cfg = dataclasses.replace(cfg, use_sac=False)
    model = build_model(plain_cfg)
    load_state(model, load_checkpoint(src), strict=True)
    converted = model.convert_to_sac()
    save_checkpoint(converted, dst)
    print(f"wrote SAC checkpoint {dst}")
    if not args.verify:
        return EXIT_OK
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    worst = 0.0
    with no_grad():
        for _ in range(10):
            image = Tensor(rng.uniform(0, 1, (1, 1, cfg.image_size, cfg.image_size)
                                       ).astype(np.float32))
            for a, b in zip(model.forward(image), converted.forward(image)):
                worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    ok = worst <= VERIFY_TOLERANCE
    print(f"verify: max abs output diff {worst:.3e} over 10 inputs "
          f"({'<=' if ok else '>'} {VERIFY_TOLERANCE:.0e})")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    layers = args.layer or None
    try:
        results = gc.run_suite(layers)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    failing: list[str] = []
    print(f"{'layer':<14}{'worst rel err':<16}status")
    for layer, per_param in results.items():
        worst = max(per_param.values())
        bad = [p for p, v in per_param.items() if v > gc.PASS_THRESHOLD]
        failing += [f"{layer}:{p}" for p in bad]
        print(f"{layer:<14}{worst:<16.3e}{'FAIL' if bad else 'ok'}")
    if failing:
        print("failing parameters:", ", ".join(failing), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_viz_switch(args) -> int:
    seed = args.seed
    if args.config is not None:
        cfg, paths = load_config(args.config, seed)
    else:
        cfg, paths = _default_config(seed)
    ckpt_path = args.checkpoint or paths.get("checkpoint_in")
    if not ckpt_path:
        raise ConfigError("viz-switch needs --checkpoint (or checkpoint_in in the config)")
    state = load_checkpoint(ckpt_path)
    if args.config is None and any(name.endswith("delta_weight") for name in state):
        cfg = dataclasses.replace(cfg, use_sac=True)
    model = build_model(cfg)
    load_state(model, state, strict=True)
    layers = model.sac_layers()
    if not layers:
        raise UsageError("checkpoint contains no SAC layers")
    if args.image is not None:
        gray = read_pgm(args.image)
        image = Tensor(gray.astype(np.float32).reshape(1, 1, *gray.shape))
    else:
        image = gen_dataset(args.scene_seed, 1, cfg.image_size)[0].image
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, _ in layers:
        path = out_dir / (name.replace("/", "_") + ".pgm")
        export_switch_map(model, image, name, path)
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfpsac",
        description="Switchable atrous convolution + recursive feature pyramid toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--config", default=None, help="JSON config path")

    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--out", default=None, help="output directory (metrics + checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", parents=[common],
                       help="convert a plain checkpoint to SAC (identity-preserving)")
    p.add_argument("--in", dest="input", default=None, help="plain checkpoint")
    p.add_argument("--out", dest="output", default=None, help="converted checkpoint")
    p.add_argument("--verify", action="store_true",
                   help=f"forward 10 seeded inputs through both models; pass iff max "
                        f"abs diff <= {VERIFY_TOLERANCE:.0e}")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every layer type (float64)")
    p.add_argument("--layer", action="append", default=None,
                   help="restrict to one layer type (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz-switch", parents=[common],
                       help="export one PGM switch map per SAC layer")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image", default=None, help="input image as binary PGM")
    p.add_argument("--scene-seed", type=int, default=0,
                   help="render a synthetic scene as the input instead")
    p.set_defaults(func=cmd_viz_switch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
