"""
Tensor and gradient tape for the reverse-mode engine

Every differentiable operation records a node on the active tape. A tape is
consumed by exactly one backward pass.
"""

from __future__ import annotations

import contextlib
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_default_dtype: ContextVar[type] = ContextVar("calseg_default_dtype", default=np.float32)
_active_tape: ContextVar[Optional["GradientTape"]] = ContextVar("calseg_active_tape", default=None)


def get_default_dtype() -> type:
    return _default_dtype.get()


@contextlib.contextmanager
def default_dtype(dtype: type) -> Iterator[None]:
    """Switch the dtype new tensors are created with (float64 for gradient checks)."""
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; forward passes inside leave no trace on any tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    """n-dimensional array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        dtype: Optional[type] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> list["Tensor"]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operators live in functional; imported lazily to avoid a cycle.
    def __add__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.add(self, other)

    def __radd__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.add(self, other)

    def __sub__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.mul(self, other)

    def __rmul__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.mul(self, other)

    def __truediv__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other: object) -> "Tensor":
        from . import functional as F

        return F.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import functional as F

        return F.neg(self)


@dataclass
class TapeNode:
    """One recorded operation: its output, its parents and how to push gradients back."""

    op: str
    output: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: BackwardFn
    tape: Optional["GradientTape"] = field(default=None, repr=False)


@dataclass
class GradientTape:
    """
    Ordered record of operations.

    Usage:
        with GradientTape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise TapeError("tape already used for a backward pass")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _active_tape.reset(self._token)  # type: ignore[arg-type]
        self._token = None

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape after backward()")
        node.tape = self
        node.output.tape_node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Propagate d(loss)/d(·) to every requires_grad tensor reachable from loss."""
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("second backward() on the same tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        reached: dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    reached[key] = parent

        leaves = []
        for key, tensor in reached.items():
            if tensor.requires_grad:
                tensor.grad = grads[key].astype(tensor.data.dtype, copy=False)
                if tensor.tape_node is None:
                    leaves.append(tensor)
        logger.debug(f"backward: {len(self.nodes)} nodes, {len(leaves)} leaves")
        return leaves


def active_tape() -> Optional[GradientTape]:
    return _active_tape.get()


def record(
    op: str,
    output: Tensor,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
) -> Tensor:
    """Attach output to the active tape if any parent needs a gradient."""
    tape = _active_tape.get()
    if tape is None or not any(p.requires_grad for p in parents):
        return output
    output.requires_grad = True
    tape.record(TapeNode(op=op, output=output, parents=parents, backward_fn=backward_fn))
    return output


def backward(loss: Tensor) -> list[Tensor]:
    """Run the backward pass of the tape that produced loss; returns the leaf tensors that got gradients."""
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        raise TapeError("loss was not recorded on a gradient tape")
    if node.tape is None:
        raise TapeError("loss node is not attached to a tape")
    return node.tape.backward(loss)
