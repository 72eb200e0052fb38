"""Central finite-difference verification of analytic gradients.

Every layer family gets a tiny float64 instance, a scalar probe loss
(weighted sum of the output against fixed random coefficients), analytic
gradients from one backward pass, and a central-difference pass over every
parameter element.  The suite runs at a generic parameter point: converted
SAC layers are nudged off their special zero-initialization first so the
check is not evaluated at a measure-zero configuration.

The seeds are pinned so that no ReLU pre-activation falls within the
central-difference window of its kink (where the numeric estimate measures
an arbitrary subgradient, not the analytic derivative).  When changing
shapes or seeds here, re-verify the per-layer error margins.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .backbone import Backbone, BackboneConfig, convert_backbone_to_sac
from .ops import (ConvParams, add, avg_pool, bce_with_logits, concat_channels, conv2d,
                  global_avg_pool, lerp, mul, relu, sigmoid, sub, sum_all, upsample)
from .rfp import AsppConnector, Fpn, FusionModule, RfpModel, aspp_connect, fpn_forward, fuse_features, rfp_forward
from .sac import convert_conv_to_sac, sac_forward
from .tensor import Tensor, fresh_tape, no_grad

FD_STEP = 1e-4
PASS_THRESHOLD = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-10)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(loss_fn: Callable[[], float], param: Tensor, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = loss_fn()
            flat[i] = saved - step
            lo = loss_fn()
            flat[i] = saved
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(loss_builder: Callable[[], Tensor], params: dict[str, Tensor],
                    step: float = FD_STEP) -> dict[str, float]:
    """Relative error per parameter between tape and finite differences."""
    with fresh_tape() as tape:
        loss = loss_builder()
        tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise AssertionError(f"no analytic gradient reached {name}")
        analytic[name] = p.grad.copy()
        p.grad = None

    def scalar_loss() -> float:
        return loss_builder().item()

    return {
        name: rel_error(analytic[name], numeric_grad(scalar_loss, p, step))
        for name, p in params.items()
    }


def _rng(salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([7151, salt])


def _t(rng: np.random.Generator, shape, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape), dtype=np.float64, requires_grad=requires_grad)


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    coeffs = Tensor(rng.normal(0.0, 1.0, out.shape), dtype=np.float64)
    return sum_all(mul(out, coeffs))


def _collect(module, prefix: str, params: dict[str, Tensor]) -> None:
    for name, t in module.named_parameters(prefix):
        params[name] = t


def _nudge(params: Iterable[Tensor], rng: np.random.Generator, scale: float = 0.2) -> None:
    for t in params:
        t.data = t.data + rng.normal(0.0, scale, t.shape)


def _build_conv():
    rng = _rng(1)
    x = _t(rng, (2, 3, 6, 6))
    plain = ConvParams.create(3, 4, 3, rng, padding=1, dtype=np.float64)
    strided = ConvParams.create(3, 2, 3, rng, stride=2, padding=2, dilation=2, dtype=np.float64)
    probe_rng = _rng(101)
    ca = Tensor(probe_rng.normal(0, 1, (2, 4, 6, 6)), dtype=np.float64)
    cb = Tensor(probe_rng.normal(0, 1, (2, 2, 3, 3)), dtype=np.float64)
    params = {"x": x}
    _collect(plain, "plain", params)
    _collect(strided, "strided", params)

    def loss():
        return add(sum_all(mul(conv2d(x, plain), ca)), sum_all(mul(conv2d(x, strided), cb)))

    return loss, params


def _build_pool():
    rng = _rng(2)
    x = _t(rng, (2, 3, 6, 6))
    probe_rng = _rng(102)
    ca = Tensor(probe_rng.normal(0, 1, (2, 3, 6, 6)), dtype=np.float64)
    cb = Tensor(probe_rng.normal(0, 1, (2, 3, 1, 1)), dtype=np.float64)

    def loss():
        return add(sum_all(mul(avg_pool(x), ca)), sum_all(mul(global_avg_pool(x), cb)))

    return loss, {"x": x}


def _build_resize():
    rng = _rng(3)
    x = _t(rng, (2, 2, 3, 4))
    point = _t(rng, (2, 3, 1, 1))
    probe_rng = _rng(103)
    ca = Tensor(probe_rng.normal(0, 1, (2, 2, 5, 7)), dtype=np.float64)
    cb = Tensor(probe_rng.normal(0, 1, (2, 3, 4, 4)), dtype=np.float64)

    def loss():
        bil = sum_all(mul(upsample(x, 5, 7, mode="bilinear"), ca))
        rep = sum_all(mul(upsample(point, 4, 4, mode="broadcast"), cb))
        return add(bil, rep)

    return loss, {"x": x, "point": point}


def _build_elementwise():
    rng = _rng(4)
    a = _t(rng, (2, 3, 4, 4))
    b = _t(rng, (2, 3, 4, 4))
    gate = _t(rng, (2, 1, 4, 4))
    chan = _t(rng, (2, 3, 1, 1))
    targets = Tensor((_rng(40).random((2, 3, 4, 4)) > 0.5).astype(np.float64))
    probe_rng = _rng(104)
    c = Tensor(probe_rng.normal(0, 1, (2, 6, 4, 4)), dtype=np.float64)

    def loss():
        mixed = lerp(sigmoid(gate), relu(a), mul(b, chan))
        stacked = concat_channels([mixed, sub(a, b)])
        return add(sum_all(mul(stacked, c)), bce_with_logits(mixed, targets))

    return loss, {"a": a, "b": b, "gate": gate, "chan": chan}


def _build_sac():
    rng = _rng(5)
    x = _t(rng, (2, 3, 6, 6))
    layer = convert_conv_to_sac(ConvParams.create(3, 4, 3, rng, padding=1, dtype=np.float64))
    _nudge((t for _, t in layer.named_parameters()), _rng(50))
    probe_rng = _rng(105)
    c = Tensor(probe_rng.normal(0, 1, (2, 4, 6, 6)), dtype=np.float64)
    params = {"x": x}
    _collect(layer, "sac", params)

    def loss():
        return _probe_fixed(sac_forward(layer, x), c)

    return loss, params


def _build_aspp():
    rng = _rng(6)
    x = _t(rng, (1, 8, 5, 5))
    aspp = AsppConnector.create(8, rng, dtype=np.float64)
    probe_rng = _rng(106)
    c = Tensor(probe_rng.normal(0, 1, (1, 8, 5, 5)), dtype=np.float64)
    params = {"x": x}
    _collect(aspp, "aspp", params)

    def loss():
        return _probe_fixed(aspp_connect(aspp, x), c)

    return loss, params


def _build_fusion():
    rng = _rng(7)
    f_prev = _t(rng, (2, 4, 5, 5))
    f_new = _t(rng, (2, 4, 5, 5))
    fusion = FusionModule.create(4, rng, dtype=np.float64)
    probe_rng = _rng(107)
    c = Tensor(probe_rng.normal(0, 1, (2, 4, 5, 5)), dtype=np.float64)
    params = {"f_prev": f_prev, "f_new": f_new}
    _collect(fusion, "fusion", params)

    def loss():
        return _probe_fixed(fuse_features(fusion, f_prev, f_new), c)

    return loss, params


def _build_fpn():
    rng = _rng(8)
    xs = [_t(rng, (1, 3, 8, 8)), _t(rng, (1, 5, 4, 4))]
    fpn = Fpn.create([3, 5], 4, rng, dtype=np.float64)
    probe_rng = _rng(108)
    cs = [Tensor(probe_rng.normal(0, 1, (1, 4, 8, 8)), dtype=np.float64),
          Tensor(probe_rng.normal(0, 1, (1, 4, 4, 4)), dtype=np.float64)]
    params = {"x0": xs[0], "x1": xs[1]}
    _collect(fpn, "fpn", params)

    def loss():
        fs = fpn_forward(fpn, xs)
        return add(_probe_fixed(fs[0], cs[0]), _probe_fixed(fs[1], cs[1]))

    return loss, params


def _build_rfp():
    rng = _rng(9)
    cfg = BackboneConfig(stages=2, channels=(8, 8), blocks_per_stage=1,
                         stem_channels=4, in_channels=1, feedback_channels=4)
    backbones = [convert_backbone_to_sac(Backbone.create(cfg, rng, dtype=np.float64))
                 for _ in range(2)]
    nudge_rng = _rng(90)
    for bb in backbones:
        _nudge((t for name, t in bb.named_parameters()
                if "delta" in name or "switch" in name or "context" in name), nudge_rng)
        # injection convs stay at zero: gradient flow through the
        # zero-initialized feedback path is exactly the case worth checking
    fpn = Fpn.create(cfg.channels, 4, rng, dtype=np.float64)
    aspp = AsppConnector.create(4, rng, dtype=np.float64)
    fusion = FusionModule.create(4, rng, dtype=np.float64)
    model = RfpModel(backbones, fpn, aspp, fusion, steps=2)
    image = _t(rng, (1, 1, 8, 8))
    probe_rng = _rng(109)
    cs = [Tensor(probe_rng.normal(0, 1, (1, 4, 2, 2)), dtype=np.float64),
          Tensor(probe_rng.normal(0, 1, (1, 4, 1, 1)), dtype=np.float64)]
    params = {"image": image}
    _collect(model, "rfp", params)
    # the first step's backbone runs with zero feedback, so its injection
    # convs never execute and have no gradient to check
    params = {n: t for n, t in params.items()
              if not (n.startswith("rfp/backbone/0/") and "/injection/" in n)}

    def loss():
        fs = rfp_forward(model, image)
        return add(_probe_fixed(fs[0], cs[0]), _probe_fixed(fs[1], cs[1]))

    return loss, params


def _probe_fixed(out: Tensor, coeffs: Tensor) -> Tensor:
    return sum_all(mul(out, coeffs))


SUITE: dict[str, Callable] = {
    "conv": _build_conv,
    "pool": _build_pool,
    "resize": _build_resize,
    "elementwise": _build_elementwise,
    "sac": _build_sac,
    "aspp": _build_aspp,
    "fusion": _build_fusion,
    "fpn": _build_fpn,
    "rfp": _build_rfp,
}


def run_suite(layers: Iterable[str] | None = None,
              step: float = FD_STEP) -> dict[str, dict[str, float]]:
    """Per-layer, per-parameter relative errors for the selected layer types."""
    names = list(SUITE) if layers is None else list(layers)
    results = {}
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown gradcheck layer {name!r}; known: {', '.join(SUITE)}")
        loss_builder, params = SUITE[name]()
        results[name] = check_gradients(loss_builder, params, step=step)
    return results
