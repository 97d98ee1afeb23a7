"""Dense float32 tensors and the floating-point layer kernels.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float32 with rank 1-4,
laid out NCHW for images and NF for feature vectors. Kernels never mutate
their inputs.
"""

import numpy as np

from leantta import _backend
from leantta.errors import ConfigError, NumericError, ShapeError

DTYPE = np.float32


def as_tensor(x, name="tensor"):
    """Validate ``x`` and return it as a contiguous float32 array."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"{name}: rank {arr.ndim} outside 1..4")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ShapeError(f"{name}: all extents must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name}: contains NaN or Inf")
    return arr


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if span < 0 or span % stride:
        raise ConfigError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give a positive integer output size"
        )
    return span // stride + 1


def conv2d(x, weights, bias, stride=1, padding=0):
    """2-D cross-correlation of an (N, C_in, H, W) input."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    weights = np.ascontiguousarray(weights, dtype=DTYPE)
    bias = np.ascontiguousarray(bias, dtype=DTYPE)
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({weights.shape[0]},)")
    conv_output_size(x.shape[2], weights.shape[2], stride, padding)
    conv_output_size(x.shape[3], weights.shape[3], stride, padding)
    return _backend.kernels.conv2d_f32(x, weights, bias, int(stride), int(padding))


def linear(x, weights, bias):
    x = np.ascontiguousarray(x, dtype=DTYPE)
    weights = np.ascontiguousarray(weights, dtype=DTYPE)
    bias = np.ascontiguousarray(bias, dtype=DTYPE)
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"linear expects rank-2 input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weights.shape[0]},)")
    return _backend.kernels.linear_f32(x, weights, bias)


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), DTYPE(0))


def global_avg_pool(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    return x.astype(np.float64).mean(axis=(2, 3)).astype(DTYPE)


def residual_add(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shape mismatch {a.shape} vs {b.shape}")
    return a + b
