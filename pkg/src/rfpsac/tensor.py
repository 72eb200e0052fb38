"""Rank-4 NCHW tensor with tape-based reverse-mode gradients.

Every value in the library is a :class:`Tensor`: a C-contiguous numpy array
of shape ``(n, c, h, w)`` in float32 (runtime default) or float64 (used by
the gradient-check suite).  Operations in :mod:`rfpsac.ops` record a backward
rule on the active :class:`Tape` whenever an input has ``requires_grad`` set;
:func:`backward` replays those rules in reverse execution order and
accumulates gradients additively into ``Tensor.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A rank-4 ``(n, c, h, w)`` array with optional gradient tracking.

    ``grad`` stays ``None`` until a backward pass reaches the tensor; it then
    holds an array of the same shape and accumulates across backward calls
    until cleared (``sgd_step`` clears it after each update).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = data  # explicit float arrays keep their precision
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank-4 NCHW, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def full(shape, value: float, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


class _TapeEntry:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], rule: Callable):
        self.output = output
        self.inputs = tuple(inputs)
        self.rule = rule


class Tape:
    """Ordered record of executed ops with their backward rules.

    Execution order is a valid topological order of the forward graph, so
    replaying entries in reverse propagates gradients correctly.  A tape is
    not shareable across concurrent writers; the module keeps one active
    tape per process (reference mode is single-threaded).
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self._entries.append(_TapeEntry(output, inputs, rule))

    def clear(self) -> None:
        self._entries.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

        Gradients accumulate additively: calling backward twice without
        clearing doubles every populated gradient.
        """
        if loss.shape != (1, 1, 1, 1):
            raise UsageError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._entries):
            g_out = local.get(id(entry.output))
            if g_out is None:
                continue
            grads = entry.rule(g_out)
            for t, g in zip(entry.inputs, grads):
                if g is None:
                    continue
                tid = id(t)
                acc = local.get(tid)
                local[tid] = g if acc is None else acc + g
                seen[tid] = t
        for tid, t in seen.items():
            if t.requires_grad:
                g = local[tid]
                t.grad = g.copy() if t.grad is None else t.grad + g


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _ACTIVE_TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / verification)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def fresh_tape():
    """Swap in an empty tape for the block; restores the previous one after."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = prev


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` over the active tape."""
    _ACTIVE_TAPE.backward(loss)


def result_tensor(data: np.ndarray, inputs: Iterable[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording ``rule`` on the active tape when needed.

    ``rule(g_out)`` must return one gradient array (or None) per input, in
    input order.
    """
    inputs = tuple(inputs)
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _ACTIVE_TAPE.record(out, inputs, rule)
    return out


def clear_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
