"""Tensor value type and a tape-based reverse-mode gradient engine.

Operations record themselves on the innermost active :class:`GradContext`
when at least one input requires a gradient. Outside a context nothing is
recorded, which is how inference runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from m2tr.errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _context_stack() -> list["GradContext"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """Dense row-major real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from m2tr.numerics import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from m2tr.numerics import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from m2tr.numerics import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from m2tr.numerics import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from m2tr.numerics import ops

        return ops.div(self, other)

    def __neg__(self):
        from m2tr.numerics import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from m2tr.numerics import ops

        return ops.matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class GradContext:
    """Ordered record of the primitives applied while the context is active."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False
    visits: int = 0

    def __enter__(self) -> "GradContext":
        _context_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _context_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def active_context() -> GradContext | None:
    stack = _context_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording, e.g. while running a frozen sub-model."""

    def __enter__(self):
        stack = _context_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _context_stack()
        stack.clear()
        stack.extend(self._saved)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op output and record it when a gradient can flow through it."""
    out = Tensor(data)
    out._is_leaf = False
    ctx = active_context()
    if ctx is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        ctx.records.append(_Record(out, tuple(parents), backward, op))
    return out


def backward(loss: Tensor, ctx: GradContext, params: Sequence[Tensor] | None = None) -> None:
    """Accumulate d loss / d leaf into the ``grad`` slot of every reachable leaf.

    ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if ctx.consumed:
        raise ContractError("GradContext already replayed")
    ctx.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(ctx.records):
        ctx.visits += 1
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parent_grads = rec.backward(g)
        for parent, pg in zip(rec.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{rec.op}: adjoint shape {pg.shape} != {parent.shape}")
            if parent._is_leaf:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg.astype(parent.data.dtype, copy=False)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if loss._is_leaf and loss.requires_grad:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
