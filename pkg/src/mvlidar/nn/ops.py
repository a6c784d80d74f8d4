"""Deterministic CNN inference primitives over (depth, height, width) tensors.

Tensors are plain float32 numpy arrays in channel-first layout. All layer
arithmetic is 32-bit with 64-bit accumulation inside reductions; given
identical inputs the outputs are bit-identical run to run. The convolution
vocabulary is intentionally narrow: 1x1 and 3x3 filters with same padding,
stride 1 or 2; 2x2 stride-2 transposed convolutions; 2x2 max pooling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import _kernels as kernels
from ..errors import NonFiniteValue, ShapeMismatch

BN_EPS = 1e-5

# debug mode: verify every layer output is finite (slow; off by default)
CHECK_FINITE = bool(os.environ.get("MVLIDAR_CHECK_FINITE"))


def check_chw(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeMismatch(f"{what} must be (depth, height, width), got {t.shape}")
    return t


def _checked(t: np.ndarray) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(t).all():
        raise NonFiniteValue("non-finite values in layer output")
    return t


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1) -> np.ndarray:
    """Direct convolution with same padding (pad 1 for 3x3, 0 for 1x1).

    weight is (filters, in_depth, k, k) with k in {1, 3}; stride 1 or 2.
    Output spatial dims are ceil(in / stride).
    """
    x = check_chw(x, "conv input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatch(f"conv weight must be (F, C, k, k), got {weight.shape}")
    k = weight.shape[2]
    if k not in (1, 3):
        raise ValueError(f"filter size {k} unsupported; expected 1 or 3")
    if stride not in (1, 2):
        raise ValueError(f"stride {stride} unsupported; expected 1 or 2")
    if weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(
            f"conv weight expects depth {weight.shape[1]}, input has {x.shape[0]}")
    return _checked(kernels.conv2d(x, weight, bias, stride))


def deconv2d(x: np.ndarray, weight: np.ndarray,
             bias: np.ndarray | None = None) -> np.ndarray:
    """Transposed convolution, kernel 2x2 stride 2: exact 2x upsampling.

    weight is (in_depth, filters, 2, 2).
    """
    x = check_chw(x, "deconv input")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeMismatch(f"deconv weight must be (C, F, 2, 2), got {weight.shape}")
    if weight.shape[0] != x.shape[0]:
        raise ShapeMismatch(
            f"deconv weight expects depth {weight.shape[0]}, input has {x.shape[0]}")
    return _checked(kernels.deconv2d(x, weight, bias))


def batchnorm_relu(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Inference-mode batchnorm with fixed statistics, then ReLU.

    y = max(0, gamma * (x - mean) / sqrt(var + eps) + beta), per channel.
    """
    x = check_chw(x, "batchnorm input")
    c = x.shape[0]
    for arr, nm in ((gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")):
        if arr.shape != (c,):
            raise ShapeMismatch(f"batchnorm {nm} must be ({c},), got {arr.shape}")
    scale = (gamma / np.sqrt(var.astype(np.float64) + BN_EPS)).astype(np.float32)
    shift = (beta - mean * scale).astype(np.float32)
    y = x * scale[:, None, None] + shift[:, None, None]
    return _checked(np.maximum(y, 0.0, out=y))


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2; spatial dims must be even."""
    x = check_chw(x, "maxpool input")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def maxpool3_same(x: np.ndarray) -> np.ndarray:
    """3x3 max pooling, stride 1, same padding (used inside inception)."""
    x = check_chw(x, "maxpool input")
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    out = pad[:, 1:-1, 1:-1].copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            np.maximum(out, pad[:, 1 + di:pad.shape[1] - 1 + di,
                                1 + dj:pad.shape[2] - 1 + dj], out=out)
    return out


def concat_depth(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two tensors along depth; a's channels come first."""
    a = check_chw(a, "concat lhs")
    b = check_chw(b, "concat rhs")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch(
            f"concat spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the depth axis, stabilized by max subtraction."""
    x = check_chw(x, "softmax input")
    shifted = (x - x.max(axis=0, keepdims=True)).astype(np.float64)
    e = np.exp(shifted)
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


@dataclass(frozen=True)
class ConvParams:
    """One convolution plus its (optional) batchnorm statistics.

    Layers inside the trunk and blocks carry batchnorm + ReLU and no
    conv bias; final task-head layers carry a bias and no activation.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None


def conv_bn_relu(x: np.ndarray, p: ConvParams, stride: int = 1) -> np.ndarray:
    y = conv2d(x, p.weight, p.bias, stride)
    if p.has_bn:
        y = batchnorm_relu(y, p.gamma, p.beta, p.mean, p.var)
    return y


def deconv_bn_relu(x: np.ndarray, p: ConvParams) -> np.ndarray:
    y = deconv2d(x, p.weight, p.bias)
    if p.has_bn:
        y = batchnorm_relu(y, p.gamma, p.beta, p.mean, p.var)
    return y


@dataclass(frozen=True)
class InceptionModuleParams:
    """Four parallel branches, concatenated: 1x1 / 1x1-3x3 / 1x1-3x3-3x3 /
    pool-1x1. Branch widths are out_depth/4 with 1x1 reducers at half that."""

    b1: ConvParams
    b2_reduce: ConvParams
    b2: ConvParams
    b3_reduce: ConvParams
    b3a: ConvParams
    b3b: ConvParams
    b4: ConvParams


def inception_module(x: np.ndarray, p: InceptionModuleParams) -> np.ndarray:
    y1 = conv_bn_relu(x, p.b1)
    y2 = conv_bn_relu(conv_bn_relu(x, p.b2_reduce), p.b2)
    y3 = conv_bn_relu(conv_bn_relu(conv_bn_relu(x, p.b3_reduce), p.b3a), p.b3b)
    y4 = conv_bn_relu(maxpool3_same(x), p.b4)
    return np.concatenate([y1, y2, y3, y4], axis=0)


def inception_block(x: np.ndarray, modules: list[InceptionModuleParams],
                    pool_first: bool = False) -> np.ndarray:
    """A chain of inception modules, optionally preceded by 2x2 max pooling
    (the blocks that halve resolution)."""
    if pool_first:
        x = maxpool2(x)
    for m in modules:
        x = inception_module(x, m)
    return x
