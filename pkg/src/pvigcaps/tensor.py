"""Dense tensors with tape-based reverse-mode differentiation.

Operations are registered by name in :data:`OPS`.  A forward call runs the
op's ``forward`` on raw ndarrays; when a :class:`Tape` is active and any
input requires a gradient, a record is appended so :func:`backward` can
later replay the op's ``backward`` rule in reverse tape order.

Backward rules are looked up in the registry at backward time, never
captured at forward time, so a registry entry can be swapped out (the
gradient checker's negative-control tests rely on this).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .exceptions import ContractError, NumericError

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64
_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


def set_precision(mode: str) -> None:
    """Select the global float width: ``"f64"`` (verification) or ``"f32"``."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {mode!r}")
    _dtype = _PRECISIONS[mode]


def get_precision() -> str:
    return "f64" if _dtype == np.float64 else "f32"


def get_dtype():
    return _dtype


def verification_mode() -> bool:
    """Finite/domain checks are enforced only in 64-bit mode."""
    return _dtype == np.float64


@contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, shape is {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the functional ops live in pvigcaps.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.negate(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that requires a gradient."""
    return Tensor(data, requires_grad=True)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    ctx: dict


@dataclass
class Tape:
    """Ordered log of differentiable operations; use as a context manager."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def op_sequence(self) -> list[str]:
        return [r.op for r in self.records]


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class GradStore(dict):
    """Gradients keyed by node id; also indexable by the tensor itself."""

    def __getitem__(self, key):
        return super().__getitem__(key.id if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return super().get(key.id if isinstance(key, Tensor) else key, default)

    def __contains__(self, key):
        return super().__contains__(key.id if isinstance(key, Tensor) else key)


@dataclass
class OpDef:
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[[dict, np.ndarray], tuple]
    differentiable: bool = True


OPS: dict[str, OpDef] = {}


def register(name: str, backward: Callable, differentiable: bool = True):
    """Decorator registering ``forward`` under ``name`` with its backward rule."""

    def deco(forward):
        OPS[name] = OpDef(name, forward, backward, differentiable)
        return forward

    return deco


def apply(name: str, *inputs: Tensor, **attrs: Any) -> Tensor:
    op = OPS[name]
    ctx: dict = {}
    out = op.forward(ctx, *[t.data for t in inputs], **attrs)
    if verification_mode() and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericError(f"{name} produced non-finite values from finite inputs")
    tape = active_tape()
    needs_grad = tape is not None and op.differentiable and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad, dtype=out.dtype)
    if needs_grad:
        tape.records.append(Record(name, inputs, result.id, ctx))
        result._tape = tape
    return result


def backward(root: Tensor) -> GradStore:
    """Gradients of scalar ``root`` w.r.t. every reachable grad-flagged leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise ContractError("root was not recorded on a tape (no grad-flagged inputs or no active tape)")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(rec.output_id)
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = OPS[rec.op].backward(rec.ctx, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ContractError(f"{rec.op} backward gave shape {gi.shape} for input {t.shape}")
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    return GradStore((k, v) for k, v in grads.items() if k not in produced)
