"""Switchable atrous convolution.

A converted layer evaluates its input at two atrous rates with locked
weights (the dilated branch always sees ``w + delta_w``) and blends the two
results per location through a learned switch map.  Global-context modules
wrap the whole thing on both sides.  Conversion from a plain 3x3 convolution
is exact: until any parameter changes, the converted layer reproduces the
original output bit for bit.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from .errors import DimensionError, UsageError
from .ops import ConvParams, add, avg_pool, conv2d, global_avg_pool, lerp, _join
from .tensor import Tensor

DEFAULT_RATE = 3


class SwitchFunction:
    """Per-location mixing map: 5x5 average pool, then a 1x1 convolution.

    At the standard initialization (weight 0, bias 1) the map is exactly 1
    everywhere.  The output is intentionally not squashed: initialization
    must be able to hit 1 exactly, so values are unbounded reals.
    """

    def __init__(self, conv: ConvParams):
        if conv.c_out != 1 or conv.k != 1:
            raise DimensionError("switch needs a 1x1 convolution with a single output channel")
        self.conv = conv

    @classmethod
    def identity_init(cls, c_in: int, stride: int = 1, dtype=None) -> "SwitchFunction":
        return cls(ConvParams.zero_init(c_in, 1, k=1, stride=stride, bias_value=1.0, dtype=dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv.named_parameters(prefix)


def switch_eval(s: SwitchFunction, x: Tensor) -> Tensor:
    if x.c != s.conv.c_in:
        raise DimensionError(f"switch expects {s.conv.c_in} channels, got {x.c}")
    return conv2d(avg_pool(x, k=5, stride=1, padding=2), s.conv)


class GlobalContext:
    """Image-level additive context: global pool, 1x1 conv, broadcast add.

    One linear layer, no non-linearity; zero-initialized it is the identity.
    """

    def __init__(self, conv: ConvParams):
        if conv.c_out != conv.c_in or conv.k != 1:
            raise DimensionError("global context needs a channel-preserving 1x1 convolution")
        self.conv = conv

    @classmethod
    def zero_init(cls, channels: int, dtype=None) -> "GlobalContext":
        return cls(ConvParams.zero_init(channels, channels, k=1, dtype=dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv.named_parameters(prefix)


def global_context_apply(g: GlobalContext, x: Tensor) -> Tensor:
    if x.c != g.conv.c_in:
        raise DimensionError(f"global context expects {g.conv.c_in} channels, got {x.c}")
    return add(x, conv2d(global_avg_pool(x), g.conv))


_CAPTURE: list | None = None


@contextlib.contextmanager
def capture_switch_maps():
    """Collect (layer, switch map) pairs for every SAC forward in the block."""
    global _CAPTURE
    prev = _CAPTURE
    _CAPTURE = []
    try:
        yield _CAPTURE
    finally:
        _CAPTURE = prev


class SacConv:
    """One switchable atrous convolution layer.

    The rate-1 branch uses ``weight``; the rate-r branch is locked to
    ``weight + delta_weight`` and is materialized that way on every forward,
    so training ``weight`` moves both branches while ``delta_weight`` only
    moves the dilated one.
    """

    def __init__(self, weight: Tensor, delta_weight: Tensor, bias: Tensor | None,
                 switch: SwitchFunction, pre_context: GlobalContext,
                 post_context: GlobalContext, rate: int = DEFAULT_RATE,
                 stride: int = 1, padding: int = 1):
        if weight.shape != delta_weight.shape:
            raise DimensionError(
                f"delta weight {delta_weight.shape} must match weight {weight.shape}")
        if rate < 2:
            raise UsageError(f"the dilated branch needs rate >= 2, got {rate}")
        self.weight = weight
        self.delta_weight = delta_weight
        self.bias = bias
        self.switch = switch
        self.pre_context = pre_context
        self.post_context = post_context
        self.rate = rate
        self.stride = stride
        self.padding = padding

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield _join(prefix, "weight"), self.weight
        yield _join(prefix, "delta_weight"), self.delta_weight
        if self.bias is not None:
            yield _join(prefix, "bias"), self.bias
        yield from self.switch.named_parameters(_join(prefix, "switch"))
        yield from self.pre_context.named_parameters(_join(prefix, "pre_context"))
        yield from self.post_context.named_parameters(_join(prefix, "post_context"))


def sac_forward(layer: SacConv, x: Tensor) -> Tensor:
    """s*Conv(x, w, 1) + (1-s)*Conv(x, w+dw, r), context modules on both ends."""
    if x.c != layer.c_in:
        raise DimensionError(f"SAC layer expects {layer.c_in} channels, got {x.c}")
    x1 = global_context_apply(layer.pre_context, x)
    s = switch_eval(layer.switch, x1)
    k, r = layer.k, layer.rate
    plain = ConvParams(layer.weight, layer.bias, stride=layer.stride,
                       padding=layer.padding, dilation=1)
    wide_w = add(layer.weight, layer.delta_weight)
    # padding grows with the effective kernel so both branches share geometry
    wide = ConvParams(wide_w, layer.bias, stride=layer.stride,
                      padding=layer.padding + (k - 1) * (r - 1) // 2, dilation=r)
    y = lerp(s, conv2d(x1, plain), conv2d(x1, wide))
    if _CAPTURE is not None:
        _CAPTURE.append((layer, s))
    return global_context_apply(layer.post_context, y)


def convert_conv_to_sac(p: ConvParams, rate: int = DEFAULT_RATE) -> SacConv:
    """Wrap a plain 3x3 convolution into a SAC layer without changing its output.

    The original weights are copied; the switch starts at weight 0 / bias 1
    (map identically 1), the delta and both context modules start at zero, so
    the first forward reproduces the plain convolution exactly.
    """
    if p.k != 3:
        raise UsageError(f"only 3x3 layers convert to SAC, got k={p.k}")
    if p.dilation != 1:
        raise UsageError(f"layer is already dilated (rate {p.dilation})")
    if p.padding != 1:
        # the switch map (1x1 conv, same stride, no padding) only lines up
        # with the branch outputs under 'same' padding
        raise UsageError(f"only same-padded 3x3 layers convert to SAC, got padding={p.padding}")
    dtype = p.dtype
    weight = p.weight.copy()
    delta = Tensor(np.zeros_like(weight.data), requires_grad=True)
    bias = None if p.bias is None else p.bias.copy()
    return SacConv(
        weight, delta, bias,
        switch=SwitchFunction.identity_init(p.c_in, stride=p.stride, dtype=dtype),
        pre_context=GlobalContext.zero_init(p.c_in, dtype=dtype),
        post_context=GlobalContext.zero_init(p.c_out, dtype=dtype),
        rate=rate, stride=p.stride, padding=p.padding)
