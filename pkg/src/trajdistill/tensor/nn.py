"""Layer-level functions composed from the primitive ops."""
from __future__ import annotations

import math

import numpy as np

from ..errors import LabelError, ShapeError
from . import ops
from .tape import Tensor, as_tensor


def _resolve_pad(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int):
        return padding, padding
    return tuple(int(p) for p in padding)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with k[O,C,kh,kw]."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input C={x.shape[1]}, kernel C={k.shape[1]}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    kh, kw = k.shape[2:]
    pad = _resolve_pad(padding, kh, kw)
    h, w = x.shape[2:]
    if kh > h + 2 * pad[0] or kw > w + 2 * pad[1]:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad[0]}x{w + 2 * pad[1]}")
    y = ops.conv2d_raw(x, k, stride, pad)
    if bias is not None:
        y = ops.add(y, ops.reshape(bias, (1, -1, 1, 1)))
    return y


def relu(x: Tensor) -> Tensor:
    return ops.relu(x)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"max_pool2d window {kernel} larger than input {x.shape[2:]}")
    return ops.max_pool2d_raw(x, kernel, stride)


def global_max_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C), max over all spatial positions."""
    n, c, h, w = x.shape
    return ops.max_axis(ops.reshape(x, (n, c, h * w)), axis=2)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N,in] @ weight[out,in].T + bias[out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    y = ops.matmul(x, ops.transpose(weight, (1, 0)))
    if bias is not None:
        y = ops.add(y, bias)
    return y


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalisation; no running statistics."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = ops.reshape(x, (n, groups, (c // groups) * h * w))
    mu = ops.mean(xg, axis=2, keepdims=True)
    xc = ops.sub(xg, mu)
    var = ops.mean(ops.mul(xc, xc), axis=2, keepdims=True)
    inv = ops.power(ops.add(var, eps), -0.5)
    y = ops.reshape(ops.mul(xc, inv), (n, c, h, w))
    if gamma is not None:
        y = ops.mul(y, ops.reshape(gamma, (1, c, 1, 1)))
    if beta is not None:
        y = ops.add(y, ops.reshape(beta, (1, c, 1, 1)))
    return y


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true labels."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    # shift by a constant row max; the value and all derivatives are unchanged
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = ops.sub(logits, shift)
    lse = ops.log(ops.sum(ops.exp(z), axis=1))
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = ops.sum(ops.mul(z, Tensor(onehot)), axis=1)
    return ops.mean(ops.sub(lse, picked))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def constant(x, like: Tensor | None = None) -> Tensor:
    return as_tensor(x, like)
