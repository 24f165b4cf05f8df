"""Parameter containers: a minimal Module plus the conv and dense layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from m2tr.numerics import ops
from m2tr.numerics.tensor import DEFAULT_DTYPE, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    # variance-preserving uniform: Var = gain^2 / fan_in
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Walks attributes to find learnable tensors and child modules.

    Non-learnable state (running statistics) lives in a ``_buffers`` dict and
    travels with the parameters through ``state_dict``.
    """

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        """Switch batch-statistics layers between training and inference behaviour."""
        self._training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    @property
    def training(self) -> bool:
        return getattr(self, "_training", True)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p.data for name, p in self.named_parameters()}
        own.update(self.named_buffers())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, current in own.items():
            arr = np.asarray(state[name])
            if arr.shape != current.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {current.shape}")
            current[...] = arr  # in place, so parameters and buffers keep their identity and dtype


class evaluating:
    """Context manager: inference behaviour for ``module`` inside the block, previous mode after."""

    def __init__(self, module: Module):
        self._module = module

    def __enter__(self) -> Module:
        self._prev = self._module.training
        return self._module.train(False)

    def __exit__(self, *exc) -> None:
        self._module.train(self._prev)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None, gain: float = 1.0):
        self.weight = param(uniform_init(rng, (k, k, c_in, c_out), k * k * c_in, gain))
        self.bias = param(np.zeros(c_out))
        self._stride = stride
        self._padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class Dense(Module):
    def __init__(self, rng, d_in: int, d_out: int, gain: float = 1.0):
        self.weight = param(uniform_init(rng, (d_in, d_out), d_in, gain))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    """Per-channel batch normalization over NHWC maps with running statistics for inference."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels, DEFAULT_DTYPE),
                         "running_var": np.ones(channels, DEFAULT_DTYPE)}
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            lead = tuple(range(x.ndim - 1))
            n = int(np.prod([x.shape[a] for a in lead]))
            mean, var = x.data.mean(axis=lead), x.data.var(axis=lead)
            m = self._momentum
            for key, stat in (("running_mean", mean), ("running_var", var * n / max(n - 1, 1))):
                buf = self._buffers[key]
                buf[...] = (1 - m) * buf + m * stat
            return ops.batch_norm(x, self.gamma, self.beta, self._eps)
        inv = 1.0 / np.sqrt(self._buffers["running_var"] + self._eps)
        xhat = ops.mul(ops.sub(x, self._buffers["running_mean"].astype(x.dtype)), inv.astype(x.dtype))
        return ops.add(ops.mul(xhat, self.gamma), self.beta)
