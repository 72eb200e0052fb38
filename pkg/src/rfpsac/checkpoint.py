"""Named-tensor checkpoint archive.

File layout (all integers little-endian):

    magic "RFPK" | u32 version = 1 | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 dtype (0=f32, 1=f64)
                | u8 ndim | ndim x u32 dims | row-major payload

Round trips are bit-exact.  Loading reads the whole archive before touching
any model, so a malformed file never leaves partial state behind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"RFPK"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def state_dict(model) -> dict[str, np.ndarray]:
    """Snapshot a model's named parameters (data copies, insertion-ordered)."""
    state: dict[str, np.ndarray] = {}
    for name, tensor in model.named_parameters():
        if name in state:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        state[name] = tensor.data.copy()
    return state


def save_checkpoint(model_or_state, path) -> None:
    state = model_or_state if isinstance(model_or_state, dict) else state_dict(model_or_state)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name!r}")
        code = _CODE_FOR_KIND.get(np.dtype(arr.dtype))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(dims)
        if name in state:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        state[name] = arr.copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return state


@dataclass
class LoadReport:
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.missing and not self.unexpected


def load_state(model, state: dict[str, np.ndarray], strict: bool = True) -> LoadReport:
    """Copy checkpoint tensors into matching model parameters.

    Shape mismatches always raise.  With ``strict``, any missing or
    unexpected name raises too (the error lists every offender); without it
    they are reported and the unmatched parameters keep their current values,
    which is how a plain-conv checkpoint initializes a SAC-converted model:
    the shared weights load, the SAC-only parameters keep their conversion
    defaults.
    """
    params = dict(model.named_parameters())
    report = LoadReport(
        missing=[n for n in params if n not in state],
        unexpected=[n for n in state if n not in params])
    misshapen = [
        f"misshapen {n}: checkpoint {state[n].shape} vs model {params[n].shape}"
        for n in params
        if n in state and tuple(state[n].shape) != tuple(params[n].shape)
    ]
    lines = list(misshapen)
    if strict:
        lines += [f"missing from checkpoint: {n}" for n in report.missing]
        lines += [f"unexpected in checkpoint: {n}" for n in report.unexpected]
    if lines:
        raise CheckpointError("checkpoint does not fit the model:\n  " + "\n  ".join(lines))
    for name, tensor in params.items():
        if name in state:
            tensor.data = state[name].astype(tensor.dtype, copy=True)
    return report
