from m2tr.numerics import ops
from m2tr.numerics.fft import KERNEL_CALLS, ComplexSpectrum, fft2d, ifft2d
from m2tr.numerics.gradcheck import check_gradients, gradcheck
from m2tr.numerics.layers import BatchNorm, Conv2d, Dense, LayerNorm, Module, evaluating
from m2tr.numerics.ops import conv2d, dense, softmax_rows, upsample_bilinear
from m2tr.numerics.tensor import GradContext, Tensor, backward, no_grad
from m2tr.numerics.tns import read_tns, write_tns

__all__ = [
    "KERNEL_CALLS",
    "BatchNorm",
    "ComplexSpectrum",
    "Conv2d",
    "Dense",
    "GradContext",
    "LayerNorm",
    "Module",
    "Tensor",
    "backward",
    "check_gradients",
    "conv2d",
    "dense",
    "evaluating",
    "fft2d",
    "gradcheck",
    "ifft2d",
    "no_grad",
    "ops",
    "read_tns",
    "softmax_rows",
    "upsample_bilinear",
    "write_tns",
]
