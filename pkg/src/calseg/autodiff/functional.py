"""
Differentiable operators

The operator set is closed: conv2d (stride 1, zero padding), batchnorm, relu,
linear, global average pool, softmax, log_softmax, logsumexp, elementwise
arithmetic, reductions and gather-by-index. Binary operators accept two tensors
of identical shape or a tensor and a scalar; there is no general broadcasting.
"""

from __future__ import annotations

import logging
from typing import Literal, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteError, RangeError, ShapeError
from .tensor import Tensor, record

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

BatchNormMode = Literal["train", "eval", "stat"]
Operand = Union[Tensor, np.ndarray, float, int]


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op}: non-finite input")


def _as_tensor(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _pair(a: Operand, b: Operand, op: str) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    a_t = _as_tensor(a, like=tb)
    b_t = _as_tensor(b, like=ta or a_t)
    if a_t.shape != b_t.shape and a_t.size != 1 and b_t.size != 1:
        raise ShapeError(f"{op}: shapes {a_t.shape} and {b_t.shape} differ (no broadcasting)")
    return a_t, b_t


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Fold a gradient back onto a size-1 operand that was spread over g."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ----------------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b, "add")
    out = Tensor(a.data + b.data, dtype=a.data.dtype.type)
    return record(
        "add", out, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=a.data.dtype.type)
    return record(
        "sub", out, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=a.data.dtype.type)
    return record(
        "mul", out, (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b, "div")
    out = Tensor(a.data / b.data, dtype=a.data.dtype.type)
    return record(
        "div", out, (a, b),
        lambda g: (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.data.dtype.type)
    return record("neg", out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), dtype=a.data.dtype.type)
    return record("exp", out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    out = Tensor(np.log(a.data), dtype=a.data.dtype.type)
    return record("log", out, (a,), lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.abs(a.data), dtype=a.data.dtype.type)
    # sign(0) = 0 is a valid subgradient
    return record("abs", out, (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0), dtype=a.data.dtype.type)
    return record("relu", out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(s, dtype=x.dtype.type)
    return record("sigmoid", out, (a,), lambda g: (g * s * (1 - s),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), dtype=a.data.dtype.type)
    return record("clip", out, (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# Reductions and shape
# ----------------------------------------------------------------------------


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = Tensor(a.data.sum(axis=axis), dtype=a.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.full(a.shape, g.reshape(()), dtype=a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum", out, (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return div(sum(a, axis=axis), float(count))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype.type)
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor; gradients scatter-add back."""
    idx = np.asarray(flat_index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError(f"take: index out of range for size {a.size}")
    out = Tensor(a.data.reshape(-1)[idx], dtype=a.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        scattered = np.bincount(idx, weights=g.astype(np.float64), minlength=a.size)
        return (scattered.astype(a.data.dtype).reshape(a.shape),)

    return record("take", out, (a,), backward)


def class_index(shape: tuple[int, ...], classes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Flat indices into an N×C×H×W tensor picking classes[n,h,w] at every masked pixel.

    Pixels are visited in (n, h, w) raster order.
    """
    n, c, h, w = shape
    nn, hh, ww = np.nonzero(mask)
    cc = classes[nn, hh, ww].astype(np.int64)
    if cc.size and (cc.min() < 0 or cc.max() >= c):
        raise ShapeError(f"class index outside 0..{c - 1}")
    return ((nn * c + cc) * h + hh) * w + ww


def pixel_index(mask: np.ndarray) -> np.ndarray:
    """Flat indices of masked pixels of an N×H×W tensor, raster order."""
    return np.flatnonzero(mask.reshape(-1))


# ----------------------------------------------------------------------------
# Class-axis operators
# ----------------------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(z: Tensor, axis: int = 1) -> Tensor:
    _require_finite(z.data, "softmax")
    s = _softmax_np(z.data, axis)
    out = Tensor(s, dtype=z.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (z,), backward)


def log_softmax(z: Tensor, axis: int = 1) -> Tensor:
    _require_finite(z.data, "log_softmax")
    m = z.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z.data - m).sum(axis=axis, keepdims=True))
    out = Tensor(z.data - lse, dtype=z.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        s = np.exp(out.data)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (z,), backward)


def logsumexp(z: Tensor, t: float = 1.0, axis: int = 1) -> Tensor:
    """
    Smooth maximum t·log Σ exp(z/t) along axis, computed in max-shift form.

    The result lies in [max z, max z + t·ln C].
    """
    if not (t > 0 and np.isfinite(t)):
        raise RangeError(f"logsumexp temperature must be positive and finite, got {t}")
    if z.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty class axis")
    _require_finite(z.data, "logsumexp")
    m = z.data.max(axis=axis, keepdims=True)
    scaled = np.exp((z.data - m) / t)
    total = scaled.sum(axis=axis, keepdims=True)
    value = (m + t * np.log(total)).squeeze(axis)
    out = Tensor(value, dtype=z.data.dtype.type)
    weights = scaled / total

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.expand_dims(g, axis) * weights,)

    return record("logsumexp", out, (z,), backward)


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with zero padding k//2 (odd square kernels); N×Ci×H×W -> N×Co×H×W."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, ci, h, wd = x.shape
    co, wci, k, k2 = w.shape
    if wci != ci or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    p = k // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # N,Ci,H,W,k,k
    y = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,Co
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if b is not None:
        y += b.data[None, :, None, None]
    out = Tensor(y, dtype=x.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_x = grad_w = grad_b = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
            gwin = sliding_window_view(gp, (k, k), axis=(2, 3))  # N,Co,H,W,k,k
            flipped = w.data[:, :, ::-1, ::-1]
            grad_x = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # N,H,W,Ci
            grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
        if w.requires_grad:
            grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # Co,Ci,k,k
        if b is not None and b.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        return (grad_x, grad_w, grad_b) if b is not None else (grad_x, grad_w)

    parents = (x, w, b) if b is not None else (x, w)
    return record("conv2d", out, parents, backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: BatchNormMode,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """
    Batch normalization over N×C×H×W.

    train: normalize by batch statistics, update running statistics.
           The running variance takes the unbiased batch variance.
    eval:  normalize by running statistics.
    stat:  like train, but batch statistics are constants in the backward pass,
           so gradients reach gamma and beta without flowing through mu, sigma^2.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but affine shape {gamma.shape}")
    if mode not in ("train", "eval", "stat"):
        raise ValueError(f"unknown batchnorm mode: {mode}")

    if mode == "eval":
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    else:
        if n < 2:
            raise ShapeError(f"batchnorm in {mode} mode needs a batch of at least 2, got {n}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n * h * w) / (n * h * w - 1)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y, dtype=x.data.dtype.type)
    count = n * h * w

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if mode == "train":
            grad_x = scale / count * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = dxhat * scale
        return grad_x, grad_gamma, grad_beta

    return record(f"batchnorm[{mode}]", out, (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x: N×F, w: O×F, b: O -> N×O."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data[None, :]
    out = Tensor(y, dtype=x.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        grads = (g @ w.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if b is not None else grads

    parents = (x, w, b) if b is not None else (x, w)
    return record("linear", out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), dtype=x.data.dtype.type)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record("global_avg_pool", out, (x,), backward)
