"""
Segmentation network, value net and stage masks
"""

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import Tensor, get_default_dtype
from .autodiff import functional as F
from .autodiff.functional import BatchNormMode
from .errors import ShapeError, StageMaskError

logger = logging.getLogger(__name__)

StateDict = dict[str, np.ndarray]


class Parameter(Tensor):
    """A named trainable array. requires_grad mirrors the stage mask."""

    def __init__(self, name: str, data: np.ndarray, kind: str) -> None:
        self.name = name
        self.kind = kind
        self.trainable = True
        super().__init__(data, requires_grad=True)

    @property  # type: ignore[override]
    def requires_grad(self) -> bool:
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self.trainable = bool(value)

    @property
    def is_bn_affine(self) -> bool:
        return self.kind in ("bn_gamma", "bn_beta")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


class Conv2d:
    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator) -> None:
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k), "conv_w")
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out), "conv_b")

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class BatchNorm2d:
    """Affine gamma/beta plus running statistics; mode picks the normalization path."""

    def __init__(self, name: str, channels: int) -> None:
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), "bn_gamma")
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), "bn_beta")
        self.running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.running_var = np.ones(channels, dtype=get_default_dtype())
        self.mode: BatchNormMode = "train"

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.mode)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }


class ConvBlock:
    """conv 3×3 -> BN -> ReLU."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator) -> None:
        self.name = name
        self.conv = Conv2d(f"{name}.conv", c_in, c_out, k, rng)
        self.bn = BatchNorm2d(f"{name}.bn", c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters() + self.bn.parameters()


class _Module:
    """Shared parameter/state plumbing for the two networks."""

    blocks: list[ConvBlock]

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def batchnorms(self) -> list[BatchNorm2d]:
        return [b.bn for b in self.blocks]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p

    def state_dict(self) -> StateDict:
        """Copies of every parameter and BN buffer, keyed by name."""
        state = {p.name: p.data.copy() for p in self.parameters()}
        for bn in self.batchnorms():
            state.update({k: v.copy() for k, v in bn.buffers().items()})
        return state

    def load_state_dict(self, state: StateDict) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ShapeError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for p in self.parameters():
            if state[p.name].shape != p.data.shape:
                raise ShapeError(f"{p.name}: shape {state[p.name].shape} != {p.data.shape}")
            p.data = state[p.name].astype(p.data.dtype, copy=True)
        for bn in self.batchnorms():
            bn.running_mean[...] = state[f"{bn.name}.running_mean"]
            bn.running_var[...] = state[f"{bn.name}.running_var"]

    def set_bn_mode(self, mode: BatchNormMode) -> None:
        for bn in self.batchnorms():
            bn.mode = mode

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self, only: Optional[Sequence[Parameter]] = None) -> str:
        """Hex digest over parameter bytes; equal digests mean bit-identical parameters."""
        digest = hashlib.sha256()
        for p in only if only is not None else self.parameters():
            digest.update(p.name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class SegModelSpec:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 32, 32)
    kernel_size: int = 3
    num_classes: int = 5
    tap_layer: int = 3


class SegModel(_Module):
    """
    Stride-1 conv/BN/ReLU blocks followed by a 1×1 classifier head.

    forward returns the logits and the activations after block `tap_layer`
    (1-based), which feed the value net.
    """

    def __init__(self, spec: SegModelSpec, rng: np.random.Generator) -> None:
        if not 1 <= spec.tap_layer <= len(spec.channels):
            raise ShapeError(f"tap_layer {spec.tap_layer} outside 1..{len(spec.channels)}")
        self.spec = spec
        self.blocks = []
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.channels, start=1):
            self.blocks.append(ConvBlock(f"block{i}", c_in, c_out, spec.kernel_size, rng))
            c_in = c_out
        self.head = Conv2d("head", c_in, spec.num_classes, 1, rng)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def feature_channels(self) -> int:
        return self.spec.channels[self.spec.tap_layer - 1]

    def feature_extractor(self) -> list[ConvBlock]:
        return self.blocks[: self.spec.tap_layer]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params + self.head.parameters()

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected N×{self.spec.in_channels}×H×W input, got {x.shape}")
        feature: Optional[Tensor] = None
        h = x
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i == self.spec.tap_layer:
                feature = h
        assert feature is not None
        return self.head(h), feature

    __call__ = forward


@dataclass(frozen=True)
class ValueNetSpec:
    in_channels: int = 32
    channels: tuple[int, ...] = (32, 16)
    kernel_size: int = 3


class ValueNet(_Module):
    """conv/BN/ReLU blocks, global average pool, linear head, sigmoid: one ECE estimate per image."""

    def __init__(self, spec: ValueNetSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.blocks = []
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.channels, start=1):
            self.blocks.append(ConvBlock(f"value{i}", c_in, c_out, spec.kernel_size, rng))
            c_in = c_out
        self.fc_weight = Parameter("value_fc.weight", he_normal(rng, (1, c_in), c_in) * 0.1, "linear_w")
        self.fc_bias = Parameter("value_fc.bias", np.zeros(1), "linear_b")

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params + [self.fc_weight, self.fc_bias]

    def forward(self, feature: Tensor) -> Tensor:
        if feature.ndim != 4 or feature.shape[1] != self.spec.in_channels:
            raise ShapeError(f"value net expects N×{self.spec.in_channels}×H×W, got {feature.shape}")
        h = feature
        for block in self.blocks:
            h = block(h)
        pooled = F.global_avg_pool(h)
        score = F.sigmoid(F.linear(pooled, self.fc_weight, self.fc_bias))
        return F.reshape(score, (feature.shape[0],))

    __call__ = forward


class Stage(str, Enum):
    SOURCE = "source"
    VALUENET = "valuenet"
    WARMUP = "warmup"
    ADAPT = "adapt"


def _stage_plan(
    model: SegModel, valuenet: Optional[ValueNet], stage: Stage
) -> tuple[dict[int, bool], dict[int, BatchNormMode]]:
    """Trainable flag per parameter id and BN mode per layer id for a stage."""
    seg_params = model.parameters()
    value_params = valuenet.parameters() if valuenet is not None else []
    value_bns = valuenet.batchnorms() if valuenet is not None else []
    trainable: dict[int, bool] = {}
    modes: dict[int, BatchNormMode] = {}

    if stage is Stage.SOURCE:
        trainable.update({id(p): True for p in seg_params})
        trainable.update({id(p): False for p in value_params})
        modes.update({id(bn): "train" for bn in model.batchnorms()})
        modes.update({id(bn): "eval" for bn in value_bns})
    elif stage is Stage.VALUENET:
        trainable.update({id(p): False for p in seg_params})
        trainable.update({id(p): True for p in value_params})
        modes.update({id(bn): "eval" for bn in model.batchnorms()})
        modes.update({id(bn): "train" for bn in value_bns})
    elif stage is Stage.WARMUP:
        trainable.update({id(p): p.is_bn_affine for p in seg_params + value_params})
        modes.update({id(bn): "stat" for bn in model.batchnorms() + value_bns})
    else:
        frozen = model.feature_extractor()
        frozen_ids = {id(p) for block in frozen for p in block.parameters()}
        trainable.update({id(p): id(p) not in frozen_ids for p in seg_params})
        trainable.update({id(p): False for p in value_params})
        modes.update({id(b.bn): "eval" if b in frozen else "train" for b in model.blocks})
        modes.update({id(bn): "eval" for bn in value_bns})
    return trainable, modes


def _as_stage(stage: "Stage | str") -> Stage:
    try:
        return Stage(stage)
    except ValueError:
        raise StageMaskError(f"unknown stage: {stage!r}") from None


def set_stage_masks(model: SegModel, valuenet: Optional[ValueNet], stage: "Stage | str") -> None:
    """
    Set trainable masks and BN modes for a pipeline stage.

    source   - every θ trainable, BN in train mode; the value net is absent.
    valuenet - θ frozen with BN in eval mode; φ trainable.
    warmup   - only BN gamma/beta of both networks trainable; every BN layer
               updates running statistics (stat mode).
    adapt    - θ above the tapped layer trainable; feature extractor and value
               net frozen with BN in eval mode.
    """
    stage = _as_stage(stage)
    trainable, modes = _stage_plan(model, valuenet, stage)
    params = model.parameters() + (valuenet.parameters() if valuenet is not None else [])
    for p in params:
        p.trainable = trainable[id(p)]
    for bn in model.batchnorms() + (valuenet.batchnorms() if valuenet is not None else []):
        bn.mode = modes[id(bn)]
    logger.debug(f"stage {stage.value}: {sum(trainable.values())} trainable parameter arrays")


def require_stage(model: SegModel, valuenet: Optional[ValueNet], stage: "Stage | str") -> None:
    """
    Raises:
        StageMaskError: masks or BN modes differ from what set_stage_masks gives stage
    """
    stage = _as_stage(stage)
    trainable, modes = _stage_plan(model, valuenet, stage)
    params = model.parameters() + (valuenet.parameters() if valuenet is not None else [])
    bns = model.batchnorms() + (valuenet.batchnorms() if valuenet is not None else [])
    wrong = [p.name for p in params if p.trainable != trainable[id(p)]]
    wrong += [bn.name for bn in bns if bn.mode != modes[id(bn)]]
    if wrong:
        raise StageMaskError(f"not in stage '{stage.value}': {', '.join(wrong[:5])}")


def set_eval(model: SegModel, valuenet: Optional[ValueNet] = None) -> None:
    """Evaluation: BN on running statistics everywhere; masks untouched."""
    model.set_bn_mode("eval")
    if valuenet is not None:
        valuenet.set_bn_mode("eval")


def trainable_parameters(*modules: Optional[_Module]) -> list[Parameter]:
    return [p for m in modules if m is not None for p in m.parameters() if p.trainable]


@contextmanager
def evaluating(*modules: Optional[_Module]) -> Iterator[None]:
    """Run BN on running statistics inside the block, then restore each layer's mode."""
    saved = [(bn, bn.mode) for m in modules if m is not None for bn in m.batchnorms()]
    for bn, _ in saved:
        bn.mode = "eval"
    try:
        yield
    finally:
        for bn, mode in saved:
            bn.mode = mode
