"""
Central finite-difference gradient checking
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import functional as F
from .tensor import GradientTape, Tensor, default_dtype

logger = logging.getLogger(__name__)


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar fn() with respect to every element of x (perturbed in place)."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn().item()
        flat[i] = orig - h
        f_minus = fn().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """
    Compare reverse-mode gradients of a scalar function with central differences.

    fn must rebuild its graph from the current contents of inputs on every call.
    Inputs should be float64; the check is meaningless in single precision.

    Returns:
        Worst relative error over all inputs.
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with GradientTape() as tape:
        loss = fn()
    tape.backward(loss)

    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numerical_grad(fn, x, h=h)
        err = relative_error(analytic.astype(np.float64), numeric, floor=floor)
        logger.debug(f"gradcheck input {x.shape}: rel err {err:.3e}")
        worst = max(worst, err)
    return worst


OperatorCase = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...], lo: float = 0.1, hi: float = 1.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = rng.normal(size=out.shape)
    return lambda y: F.sum(F.mul(y, r))


def _unary(op: Callable[[Tensor], Tensor], sample: Callable[[np.random.Generator], np.ndarray]) -> OperatorCase:
    def case(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
        x = Tensor(sample(rng))
        reduce = _weighted(op(x), rng)
        return (lambda: reduce(op(x))), [x]

    return case


def _binary(op: Callable[[Tensor, Tensor], Tensor], positive_rhs: bool = False) -> OperatorCase:
    def case(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) if positive_rhs else rng.normal(size=(3, 4)))
        reduce = _weighted(op(a, b), rng)
        return (lambda: reduce(op(a, b))), [a, b]

    return case


def _conv2d(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = Tensor(rng.normal(size=(3,)))
    reduce = _weighted(F.conv2d(x, w, b), rng)
    return (lambda: reduce(F.conv2d(x, w, b))), [x, w, b]


def _batchnorm(mode: F.BatchNormMode) -> OperatorCase:
    def case(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
        x = Tensor(rng.normal(size=(3, 2, 3, 3)))
        gamma = Tensor(rng.uniform(0.5, 1.5, size=(2,)))
        beta = Tensor(rng.normal(size=(2,)))
        mean, var = np.zeros(2), np.ones(2)

        def forward() -> Tensor:
            return F.batchnorm(x, gamma, beta, mean.copy(), var.copy(), mode)

        reduce = _weighted(forward(), rng)
        # stat mode treats batch statistics as constants, so only the affine part is checked
        inputs = [x, gamma, beta] if mode == "train" else [gamma, beta]
        return (lambda: reduce(forward())), inputs

    return case


def _linear(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(2,)))
    reduce = _weighted(F.linear(x, w, b), rng)
    return (lambda: reduce(F.linear(x, w, b))), [x, w, b]


def _take(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    x = Tensor(rng.normal(size=(2, 3, 2, 2)))
    idx = rng.integers(0, x.size, size=10)
    reduce = _weighted(F.take(x, idx), rng)
    return (lambda: reduce(F.take(x, idx))), [x]


def _clip_sample(rng: np.random.Generator) -> np.ndarray:
    inner = rng.uniform(0.05, 0.4, size=(3, 4))
    outer = rng.uniform(0.6, 1.5, size=(3, 4))
    magnitude = np.where(rng.random((3, 4)) < 0.5, inner, outer)
    return rng.choice([-1.0, 1.0], size=(3, 4)) * magnitude


def _logits(rng: np.random.Generator) -> np.ndarray:
    return rng.normal(size=(2, 4, 2, 3))


OPERATOR_CASES: Dict[str, OperatorCase] = {
    "add": _binary(F.add),
    "sub": _binary(F.sub),
    "mul": _binary(F.mul),
    "div": _binary(F.div, positive_rhs=True),
    "neg": _unary(F.neg, lambda rng: rng.normal(size=(3, 4))),
    "exp": _unary(F.exp, lambda rng: rng.normal(size=(3, 4))),
    "log": _unary(F.log, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "abs": _unary(F.abs, lambda rng: _away_from_zero(rng, (3, 4))),
    "relu": _unary(F.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _unary(F.sigmoid, lambda rng: rng.normal(size=(3, 4))),
    "clip": _unary(lambda x: F.clip(x, -0.5, 0.5), _clip_sample),
    "sum": _unary(lambda x: F.sum(x, axis=1), lambda rng: rng.normal(size=(3, 4))),
    "mean": _unary(lambda x: F.mean(x, axis=0), lambda rng: rng.normal(size=(3, 4))),
    "reshape": _unary(lambda x: F.reshape(x, (4, 3)), lambda rng: rng.normal(size=(3, 4))),
    "softmax": _unary(F.softmax, _logits),
    "log_softmax": _unary(F.log_softmax, _logits),
    "logsumexp": _unary(lambda z: F.logsumexp(z, 0.5, axis=1), _logits),
    "conv2d": _conv2d,
    "batchnorm_train": _batchnorm("train"),
    "batchnorm_stat": _batchnorm("stat"),
    "linear": _linear,
    "global_avg_pool": _unary(F.global_avg_pool, lambda rng: rng.normal(size=(2, 3, 3, 3))),
    "take": _take,
}


def operator_suite(
    instances: int = 20,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> Dict[str, float]:
    """Worst relative error per operator over `instances` random float64 cases."""
    rng = np.random.default_rng(seed)
    results: Dict[str, float] = {}
    with default_dtype(np.float64):
        for name in names or list(OPERATOR_CASES):
            case = OPERATOR_CASES[name]
            worst = 0.0
            for _ in range(instances):
                fn, inputs = case(rng)
                worst = max(worst, gradcheck(fn, inputs))
            results[name] = worst
            logger.info(f"gradcheck {name}: worst rel err {worst:.3e} over {instances} instances")
    return results
