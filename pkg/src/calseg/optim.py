"""
SGD with momentum and weight decay, polynomial learning-rate decay
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NonFiniteError
from .model import Parameter


def poly_lr(base_lr: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    """base_lr·(1 − it/max_it)^power; equals base_lr at 0 and 0 at max_it."""
    if max_iterations <= 0:
        return base_lr
    progress = min(max(iteration / max_iterations, 0.0), 1.0)
    return float(base_lr * (1.0 - progress) ** power)


class SGD:
    """
    Momentum SGD over a fixed parameter list.

    Only parameters whose trainable flag is set are touched; frozen ones keep their
    values bit-for-bit and get no momentum buffer or weight decay.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            grad = p.grad
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for {p.name}")
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            v = self._velocity.get(id(p))
            v = grad if v is None else self.momentum * v + grad
            self._velocity[id(p)] = v
            p.data = (p.data - self.lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
