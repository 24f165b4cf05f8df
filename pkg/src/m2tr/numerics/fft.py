"""Discrete Fourier transforms over the spatial axes of feature maps.

Power-of-two lengths use an iterative radix-2 Cooley-Tukey pass; any other
length falls back to the direct DFT matrix product. Float32 inputs are
transformed in complex64, float64 inputs in complex128.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from m2tr.errors import ShapeError
from m2tr.numerics.tensor import Tensor, make_result

# incremented on every forward transform; lets tests confirm an ablation
# really skips the frequency path
KERNEL_CALLS: Counter = Counter()


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def fft_last_axis(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized DFT along the last axis (forward sign -1)."""
    a = np.asarray(x)
    if not np.iscomplexobj(a):
        a = a.astype(np.complex128)
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    if n & (n - 1):
        return a @ dft_matrix(n, inverse).T.astype(a.dtype)
    sign = 1.0 if inverse else -1.0
    lead = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m).astype(a.dtype)
        blocks = a.reshape(*lead, n // m, m)
        out = np.empty_like(blocks)
        odd = blocks[..., half:] * tw
        np.add(blocks[..., :half], odd, out=out[..., :half])
        np.subtract(blocks[..., :half], odd, out=out[..., half:])
        a = out.reshape(*lead, n)
        m *= 2
    return a


def fft2_array(x: np.ndarray, axes: tuple[int, int], inverse: bool = False,
               dtype=np.complex128) -> np.ndarray:
    """2D transform over ``axes``; the inverse carries the 1/(H*W) factor."""
    ah, aw = axes
    nd = np.ndim(x)
    rest = [i for i in range(nd) if i not in axes]
    # transform axes last and contiguous
    perm = rest + [ah, aw]
    a = np.ascontiguousarray(np.transpose(x, perm), dtype=dtype)
    a = fft_last_axis(a, inverse)
    a = np.swapaxes(fft_last_axis(np.ascontiguousarray(np.swapaxes(a, -1, -2)), inverse), -1, -2)
    if inverse:
        a = a / (x.shape[ah] * x.shape[aw])
    return np.transpose(a, np.argsort(perm))


def _complex_dtype(real_dtype):
    # float32 maps run the transform in complex64; float64 (gradient checks) in complex128
    return np.complex64 if real_dtype == np.float32 else np.complex128


def _spatial_axes(ndim: int) -> tuple[int, int]:
    # (H, W, C) or batched (B, H, W, C)
    if ndim == 3:
        return (0, 1)
    if ndim == 4:
        return (1, 2)
    raise ShapeError(f"fft2d expects a (H, W, C) feature map, got rank {ndim}")


@dataclass
class ComplexSpectrum:
    real: Tensor
    imag: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data.astype(np.complex128) + 1j * self.imag.data


def fft2d(x: Tensor) -> ComplexSpectrum:
    """Per-channel 2D DFT of a real feature map.

    A leading batch axis is accepted. Each part is recorded as its own
    linear primitive so gradients flow through real and imaginary paths.
    """
    axes = _spatial_axes(x.ndim)
    KERNEL_CALLS["fft2d"] += 1
    cdt = _complex_dtype(x.dtype)
    spec = fft2_array(x.data, axes, dtype=cdt)
    dtype = x.dtype

    def back_real(g):
        return (fft2_array(g, axes, dtype=cdt).real.astype(dtype),)

    def back_imag(g):
        return (fft2_array(g, axes, dtype=cdt).imag.astype(dtype),)

    re = make_result(spec.real.astype(dtype), (x,), back_real, "fft2d.real")
    im = make_result(spec.imag.astype(dtype), (x,), back_imag, "fft2d.imag")
    return ComplexSpectrum(re, im)


def ifft2d(s: ComplexSpectrum) -> Tensor:
    """Real part of the inverse 2D DFT; the imaginary residue is discarded."""
    if s.real.shape != s.imag.shape:
        raise ShapeError(f"spectrum parts differ: {s.real.shape} vs {s.imag.shape}")
    axes = _spatial_axes(s.real.ndim)
    KERNEL_CALLS["ifft2d"] += 1
    dtype = s.real.dtype
    cdt = _complex_dtype(dtype)
    out = fft2_array(s.to_complex(), axes, inverse=True, dtype=cdt).real.astype(dtype)
    n = s.shape[axes[0]] * s.shape[axes[1]]

    def back(g):
        fg = fft2_array(g, axes, dtype=cdt)
        return (fg.real.astype(dtype) / n, fg.imag.astype(dtype) / n)

    return make_result(out, (s.real, s.imag), back, "ifft2d")


def ifft2d_full(s: ComplexSpectrum) -> np.ndarray:
    """Complete complex inverse (no gradient); used to inspect the discarded residue."""
    return fft2_array(s.to_complex(), _spatial_axes(s.real.ndim), inverse=True)
