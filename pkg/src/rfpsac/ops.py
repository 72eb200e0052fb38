"""Convolution, pooling, resize and elementwise primitives.

All ops are differentiable through the tape in :mod:`rfpsac.tensor`.
Convolution is cross-correlation (no kernel flip), evaluated via im2col.
Forward results on finite inputs are always finite: sigmoid and the
binary-cross-entropy loss use overflow-free formulations.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, GeometryError, UsageError
from .tensor import DEFAULT_DTYPE, Tensor, result_tensor


def effective_kernel_size(k: int, dilation: int) -> int:
    """Size of a k-tap kernel once dilation inserts (r-1) zeros between taps."""
    return k + (k - 1) * (dilation - 1)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    ke = effective_kernel_size(k, dilation)
    return (size + 2 * padding - ke) // stride + 1


class ConvParams:
    """Weights and geometry of one 2-d convolution.

    ``weight`` is ``(c_out, c_in, k, k)``; ``bias``, when present, is held in
    broadcast-ready ``(1, c_out, 1, 1)`` form.
    """

    def __init__(self, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                 padding: int = 0, dilation: int = 1):
        if weight.shape[2] != weight.shape[3]:
            raise DimensionError(f"conv kernels are square, got {weight.shape}")
        if stride < 1 or padding < 0 or dilation < 1:
            raise GeometryError(
                f"invalid conv geometry: stride={stride} padding={padding} dilation={dilation}")
        if bias is not None and bias.shape != (1, weight.shape[0], 1, 1):
            raise DimensionError(
                f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def dtype(self):
        return self.weight.dtype

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield _join(prefix, "weight"), self.weight
        if self.bias is not None:
            yield _join(prefix, "bias"), self.bias

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator,
               stride: int = 1, padding: int = 0, dilation: int = 1,
               bias: bool = True, gain: float = np.sqrt(2.0), dtype=None) -> "ConvParams":
        """Fresh layer: fan-in-scaled Gaussian weight (std gain/sqrt(fan_in)),
        zero bias."""
        dtype = dtype or DEFAULT_DTYPE
        fan_in = c_in * k * k
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, k, k))
        weight = Tensor(w.astype(dtype), requires_grad=True)
        b = Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True) if bias else None
        return cls(weight, b, stride=stride, padding=padding, dilation=dilation)

    @classmethod
    def zero_init(cls, c_in: int, c_out: int, k: int = 1, stride: int = 1,
                  padding: int = 0, dilation: int = 1, bias_value: float = 0.0,
                  dtype=None) -> "ConvParams":
        dtype = dtype or DEFAULT_DTYPE
        weight = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
        bias = Tensor(np.full((1, c_out, 1, 1), bias_value, dtype=dtype), requires_grad=True)
        return cls(weight, bias, stride=stride, padding=padding, dilation=dilation)

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), None if self.bias is None else self.bias.copy(),
                          stride=self.stride, padding=self.padding, dilation=self.dilation)


def _join(prefix: str, name: str) -> str:
    return name if not prefix else f"{prefix}/{name}"


def _check_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise UsageError(f"mixed dtypes {dt} and {t.dtype} in one op")


def _im2col(xd: np.ndarray, k: int, stride: int, padding: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Gather all kernel taps: (n, c, h, w) -> (n, c, k, k, oh, ow)."""
    n, c, _, _ = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            hi = i * dilation
            wj = j * dilation
            cols[:, :, i, j] = xd[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride]
    return cols


def _col2im(gcols: np.ndarray, shape: tuple, k: int, stride: int, padding: int,
            dilation: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add transpose of :func:`_im2col`."""
    n, c, h, w = shape
    acc = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            hi = i * dilation
            wj = j * dilation
            acc[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride] += gcols[:, :, i, j]
    if padding:
        acc = acc[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(acc)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Dilated cross-correlation with optional bias."""
    if x.c != p.c_in:
        raise DimensionError(f"conv expects {p.c_in} input channels, got {x.c}")
    _check_dtype(x, p.weight)
    n, c, h, w = x.shape
    k, stride, pad, dil = p.k, p.stride, p.padding, p.dilation
    oh = conv_output_size(h, k, stride, pad, dil)
    ow = conv_output_size(w, k, stride, pad, dil)
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv output {oh}x{ow} is empty for input {h}x{w}, k={k}, stride={stride}, "
            f"padding={pad}, dilation={dil}")

    cols = _im2col(x.data, k, stride, pad, dil, oh, ow)
    cm = cols.reshape(n, c * k * k, oh * ow)
    wm = p.weight.data.reshape(p.c_out, c * k * k)
    out = np.matmul(wm[None], cm).reshape(n, p.c_out, oh, ow)
    if p.bias is not None:
        out = out + p.bias.data

    weight, bias = p.weight, p.bias

    def rule(g: np.ndarray):
        gm = g.reshape(n, p.c_out, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wm.T[None], gm).reshape(n, c, k, k, oh, ow)
            gx = _col2im(gcols, x.shape, k, stride, pad, dil, oh, ow)
        if weight.requires_grad:
            gw = np.matmul(gm, cm.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, p.c_out, 1, 1)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return result_tensor(out, inputs, rule)


def avg_pool(x: Tensor, k: int = 5, stride: int = 1, padding: int = 2) -> Tensor:
    """Average pooling; the divisor is the full window area k*k, so padding
    cells count as zeros."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise GeometryError(f"avg_pool on empty input {x.shape}")
    oh = conv_output_size(h, k, stride, padding, 1)
    ow = conv_output_size(w, k, stride, padding, 1)
    if oh < 1 or ow < 1:
        raise GeometryError(f"avg_pool output {oh}x{ow} is empty")
    cols = _im2col(x.data, k, stride, padding, 1, oh, ow)
    area = k * k
    out = cols.sum(axis=(2, 3)) / area

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gcols = np.broadcast_to((g / area)[:, :, None, None], (n, c, k, k, oh, ow))
        return (_col2im(gcols.astype(g.dtype), x.shape, k, stride, padding, 1, oh, ow),)

    return result_tensor(out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent: (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.shape
    if h * w < 1:
        raise GeometryError(f"global_avg_pool on empty spatial extent {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return ((g / (h * w)) * np.ones_like(x.data),)

    return result_tensor(out, (x,), rule)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """1-d bilinear resampling matrix with half-pixel centers, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src)
    t = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(int)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(int)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1.0 - t).astype(dtype))
    np.add.at(m, (rows, i1), t.astype(dtype))
    return m


def upsample(x: Tensor, h_out: int, w_out: int, mode: str = "bilinear") -> Tensor:
    """Resize to (h_out, w_out); ``broadcast`` replicates a 1x1 input."""
    if h_out < 1 or w_out < 1:
        raise GeometryError(f"upsample target {h_out}x{w_out} is empty")
    n, c, h, w = x.shape
    if mode == "broadcast":
        if (h, w) != (1, 1):
            raise UsageError(f"broadcast upsample needs a 1x1 input, got {h}x{w}")
        out = np.ascontiguousarray(np.broadcast_to(x.data, (n, c, h_out, w_out)))

        def rule(g: np.ndarray):
            if not x.requires_grad:
                return (None,)
            return (g.sum(axis=(2, 3), keepdims=True),)

        return result_tensor(out, (x,), rule)

    if mode != "bilinear":
        raise UsageError(f"unknown upsample mode {mode!r}")
    mh = _interp_matrix(h_out, h, x.data.dtype)
    mw = _interp_matrix(w_out, w, x.data.dtype)
    tmp = np.einsum("oh,nchw->ncow", mh, x.data)
    out = np.einsum("pw,ncow->ncop", mw, tmp)

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gt = np.einsum("pw,ncop->ncow", mw, g)
        return (np.einsum("oh,ncow->nchw", mh, gt),)

    return result_tensor(out, (x,), rule)


def _broadcast_check(sa: tuple, sb: tuple) -> None:
    """Equal shapes, or one operand broadcastable from (n,1,h,w) or (n,c,1,1)."""
    if sa == sb:
        return
    if sa[0] != sb[0]:
        raise DimensionError(f"batch mismatch: {sa} vs {sb}")
    small, big = (sa, sb) if np.prod(sa) < np.prod(sb) else (sb, sa)
    channel_bcast = small == (big[0], 1, big[2], big[3])
    spatial_bcast = small == (big[0], big[1], 1, 1)
    if not (channel_bcast or spatial_bcast):
        raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.full(like.shape, float(v), dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data + b.data

    def rule(g: np.ndarray):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return result_tensor(out, (a, b), rule)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data - b.data

    def rule(g: np.ndarray):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = -_reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return result_tensor(out, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data * b.data

    def rule(g: np.ndarray):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return result_tensor(out, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (g * (x.data > 0),)

    return result_tensor(out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (g * out * (1.0 - out),)

    return result_tensor(out, (x,), rule)


def lerp(s: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """s*a + (1-s)*b with ``s`` broadcast over channels when (n,1,h,w).

    Exact at s == 0 and s == 1 (the identity-on-conversion proof relies on
    the s == 1 case).
    """
    _check_dtype(s, a, b)
    if a.shape != b.shape:
        raise DimensionError(f"lerp operands differ: {a.shape} vs {b.shape}")
    _broadcast_check(s.shape, a.shape)
    sd = s.data
    out = sd * a.data + (1.0 - sd) * b.data

    def rule(g: np.ndarray):
        gs = ga = gb = None
        if s.requires_grad:
            gs = _reduce_to(g * (a.data - b.data), s.shape)
        if a.requires_grad:
            ga = _reduce_to(g * sd, a.shape)
        if b.requires_grad:
            gb = _reduce_to(g * (1.0 - sd), b.shape)
        return gs, ga, gb

    return result_tensor(out, (s, a, b), rule)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise UsageError("concat_channels needs at least one part")
    _check_dtype(*parts)
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        if (t.n, t.h, t.w) != (n, h, w):
            raise DimensionError(
                f"concat parts disagree outside the channel axis: {parts[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in parts], axis=1)
    sizes = [t.c for t in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(parts))

    return result_tensor(out, tuple(parts), rule)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a (1,1,1,1) scalar."""
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def rule(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(()) * np.ones_like(x.data),)

    return result_tensor(out, (x,), rule)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy on raw logits, as a (1,1,1,1) scalar.

    Uses the max(z,0) - z*t + log1p(exp(-|z|)) form, which never overflows.
    Targets are treated as constants.
    """
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    _check_dtype(logits, targets)
    z, t = logits.data, targets.data
    per_elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = per_elem.mean(dtype=z.dtype).reshape(1, 1, 1, 1)
    count = z.size

    def rule(g: np.ndarray):
        if not logits.requires_grad:
            return (None, None)
        pos = z >= 0
        sig = np.empty_like(z)
        sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        sig[~pos] = ez / (1.0 + ez)
        return (g.reshape(()) * (sig - t) / count, None)

    return result_tensor(out, (logits, targets), rule)
