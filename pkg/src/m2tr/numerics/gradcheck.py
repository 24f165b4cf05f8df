"""Central finite-difference oracle for the tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from m2tr.numerics import ops
from m2tr.numerics.layers import Module
from m2tr.numerics.tensor import GradContext, Tensor, backward


def _scalarize(out, proj):
    if isinstance(out, Tensor) and out.size == 1:
        return out
    outs = out if isinstance(out, (tuple, list)) else (out,)
    total = None
    for o, p in zip(outs, proj):
        term = ops.sum(ops.mul(o, Tensor(p)))
        total = term if total is None else ops.add(total, term)
    return total


def check_gradients(
    fn: Callable[[], Tensor | Sequence[Tensor]],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int = 12,
    seed: int = 0,
    abs_floor: float = 1e-3,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``fn`` is re-evaluated with each probed entry nudged by +-eps. A
    non-scalar output is reduced with a fixed random projection. Each tensor's
    error is normalized by the largest gradient magnitude seen in that tensor,
    so a single near-zero entry does not dominate. The normalizer is floored at
    ``abs_floor`` so tensors whose true gradient vanishes (a key bias under
    softmax, say) are compared in absolute terms instead of amplifying roundoff.
    """
    rng = np.random.default_rng([seed, 0x6A7D])
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    out = fn()
    outs = out if isinstance(out, (tuple, list)) else (out,)
    proj = [rng.standard_normal(o.shape) for o in outs]
    with GradContext() as ctx:
        loss = _scalarize(fn(), proj)
    backward(loss, ctx, tensors)

    def evaluate() -> float:
        return float(_scalarize(fn(), proj).data)

    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(n, max_entries), replace=False)
        analytic = t.grad.reshape(-1)
        numeric = np.empty(len(picks))
        for j, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = evaluate()
            flat[idx] = orig - eps
            down = evaluate()
            flat[idx] = orig
            numeric[j] = (up - down) / (2 * eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), abs_floor)
        err = np.abs(analytic[picks] - numeric).max(initial=0.0) / scale
        worst = max(worst, float(err))
    return worst


def gradcheck(block: Module | Callable, input_shapes: Sequence[tuple[int, ...]], seed: int = 0,
              eps: float = 1e-4, max_entries: int = 12, include_inputs: bool = True) -> float:
    """Finite-difference check of every parameter (and input) of ``block`` in float64."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True, dtype=np.float64) for s in input_shapes]
    params: list[Tensor] = []
    if isinstance(block, Module):
        block.astype(np.float64)
        params = block.parameters()
    tensors = params + (inputs if include_inputs else [])
    return check_gradients(lambda: block(*inputs), tensors, eps=eps, max_entries=max_entries, seed=seed)
