"""Multi-scale patch attention, learnable spectral filter, and cross-modality fusion.

All three blocks map a (B, S_h, S_w, C) feature map to one of the same shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from m2tr.errors import ConfigError, ShapeError
from m2tr.numerics import fft as fftmod
from m2tr.numerics import ops
from m2tr.numerics.layers import Conv2d, Dense, Module, param
from m2tr.numerics.tensor import Tensor

ATTENTION_SCALES = ("paper", "sqrt_dim")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ops.reshape(x, (1, *x.shape)), True
    if x.ndim != 4:
        raise ShapeError(f"expected a (H, W, C) feature map, got shape {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


class ScaleHead(Module):
    """Self-attention among the non-overlapping r x r patches of one scale.

    Q/K/V come from a dense C -> C map applied at every pixel, so each
    flattened patch token has width r*r*C. A full (r*r*C)^2 dense map is
    infeasible for the coarse scales (64M weights at r=16, C=32).
    """

    def __init__(self, rng, channels: int, patch: int, attention_scale: str = "paper"):
        self.query = Dense(rng, channels, channels)
        self.key = Dense(rng, channels, channels)
        self.value = Dense(rng, channels, channels)
        self._patch = patch
        self._scale_mode = attention_scale

    @property
    def patch(self) -> int:
        return self._patch

    def token_width(self, channels: int) -> int:
        return self._patch * self._patch * channels

    def normalizer(self, channels: int) -> float:
        width = self.token_width(channels)
        return float(width) if self._scale_mode == "paper" else math.sqrt(width)

    def __call__(self, m: Tensor) -> Tensor:
        b, h, w, c = m.shape
        r = self._patch
        q = ops.patchify(self.query(m), r)
        k = ops.patchify(self.key(m), r)
        v = ops.patchify(self.value(m), r)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / self.normalizer(c))
        att = ops.matmul(ops.softmax_rows(scores), v)
        return ops.unpatchify(att, r, h, w, c)


class ResidualMerge(Module):
    """conv3x3 -> ReLU -> conv3x3 plus a 1x1 projection skip; reduces heads*C to C."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, gain=math.sqrt(2.0))
        self.conv2 = Conv2d(rng, c_out, c_out, 3)
        self.skip = Conv2d(rng, c_in, c_out, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(self.conv2(ops.relu(self.conv1(x))), self.skip(x))


class MultiScaleTransformerBlock(Module):
    def __init__(self, rng, channels: int, grid: tuple[int, int], patch_sides: Sequence[int],
                 attention_scale: str = "paper"):
        if attention_scale not in ATTENTION_SCALES:
            raise ConfigError(f"attention_scale must be one of {ATTENTION_SCALES}")
        if not patch_sides:
            raise ConfigError("at least one patch side is required")
        for r in patch_sides:
            if r < 1 or grid[0] % r or grid[1] % r:
                raise ConfigError(f"patch side {r} does not divide the {grid[0]}x{grid[1]} feature grid")
        self._grid = tuple(grid)
        self._channels = channels
        self.heads = [ScaleHead(rng, channels, r, attention_scale) for r in patch_sides]
        self.merge = ResidualMerge(rng, channels * len(patch_sides), channels)

    def token_counts(self) -> list[int]:
        h, w = self._grid
        return [(h // hd.patch) * (w // hd.patch) for hd in self.heads]

    def head_outputs(self, m: Tensor) -> list[Tensor]:
        x, _ = _batched(m)
        return [hd(x) for hd in self.heads]

    def __call__(self, m: Tensor) -> Tensor:
        x, squeeze = _batched(m)
        if x.shape[1:3] != self._grid or x.shape[3] != self._channels:
            raise ShapeError(f"block built for {self._grid}x{self._channels}, got {x.shape[1:]}")
        heads = [hd(x) for hd in self.heads]
        cat = heads[0] if len(heads) == 1 else ops.concat(heads, axis=-1)
        return _unbatched(self.merge(cat), squeeze)


class FrequencyFilterBlock(Module):
    """Elementwise learnable filter on the 2D spectrum; real part of the inverse."""

    def __init__(self, grid: tuple[int, int], channels: int):
        # identity filter at start
        self.filter = param(np.ones((grid[0], grid[1], channels)))

    def __call__(self, m: Tensor) -> Tensor:
        if m.shape[-3:] != self.filter.shape:
            raise ShapeError(f"filter shape {self.filter.shape} vs input {m.shape}")
        spec = fftmod.fft2d(m)
        filtered = fftmod.ComplexSpectrum(ops.mul(spec.real, self.filter), ops.mul(spec.imag, self.filter))
        return fftmod.ifft2d(filtered)


class CrossModalityFusionBlock(Module):
    """Query from one modality, key/value from the other, residual onto the RGB path."""

    def __init__(self, rng, channels: int, attention_scale: str = "paper", query_source: str = "rgb"):
        if attention_scale not in ATTENTION_SCALES:
            raise ConfigError(f"attention_scale must be one of {ATTENTION_SCALES}")
        if query_source not in ("rgb", "freq"):
            raise ConfigError("cmf_query_source must be 'rgb' or 'freq'")
        self.conv_q = Conv2d(rng, channels, channels, 1)
        self.conv_k = Conv2d(rng, channels, channels, 1)
        self.conv_v = Conv2d(rng, channels, channels, 1)
        self.conv_out = Conv2d(rng, channels, channels, 3)
        self._scale_mode = attention_scale
        self._query_source = query_source

    def normalizer(self, h: int, w: int, c: int) -> float:
        return math.sqrt(h * w * c) if self._scale_mode == "paper" else math.sqrt(c)

    def fused(self, t: Tensor, w: Tensor) -> Tensor:
        """Attention output before the residual add and output convolution."""
        b, h, wd, c = t.shape
        q_src, kv_src = (t, w) if self._query_source == "rgb" else (w, t)
        q = ops.reshape(self.conv_q(q_src), (b, h * wd, c))
        k = ops.reshape(self.conv_k(kv_src), (b, h * wd, c))
        v = ops.reshape(self.conv_v(kv_src), (b, h * wd, c))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / self.normalizer(h, wd, c))
        return ops.reshape(ops.matmul(ops.softmax_rows(scores), v), (b, h, wd, c))

    def __call__(self, t: Tensor, w: Tensor) -> Tensor:
        if t.shape != w.shape:
            raise ShapeError(f"CMF inputs differ: {t.shape} vs {w.shape}")
        tb, squeeze = _batched(t)
        wb, _ = _batched(w)
        out = self.conv_out(ops.add(self.fused(tb, wb), tb))
        return _unbatched(out, squeeze)


class NaiveFusion(Module):
    """Concatenate both streams and mix with a 3x3 conv (the no-CMF ablation)."""

    def __init__(self, rng, channels: int):
        self.conv = Conv2d(rng, 2 * channels, channels, 3)

    def __call__(self, t: Tensor, w: Tensor) -> Tensor:
        if t.shape != w.shape:
            raise ShapeError(f"fusion inputs differ: {t.shape} vs {w.shape}")
        return self.conv(ops.concat([t, w], axis=-1))


# Functional entry points mirroring the operation names.

def mst_forward(block: MultiScaleTransformerBlock, m_prev: Tensor) -> Tensor:
    return block(m_prev)


def ff_forward(block: FrequencyFilterBlock, m_prev: Tensor) -> Tensor:
    return block(m_prev)


def cmf_forward(block: CrossModalityFusionBlock, t_i: Tensor, w_i: Tensor) -> Tensor:
    return block(t_i, w_i)
