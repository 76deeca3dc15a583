"""
Shared pieces of the training loops: batching, batch loading, inference passes
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterator, List, Optional, Sequence, TypeVar

import numpy as np

from .autodiff import Tensor, no_grad
from .datagen import SegDataset, augment
from .errors import DivergenceError, EmptyInputError
from .model import SegModel, evaluating

logger = logging.getLogger(__name__)

EVAL_BATCH = 16

T = TypeVar("T")


def make_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """
    Split range(n), shuffled when rng is given, into batches of batch_size.

    A trailing batch of one is merged into the previous one: BatchNorm in train
    or stat mode needs at least two samples.
    """
    if n < 2:
        raise EmptyInputError(f"need at least 2 images to train, got {n}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def load_batch(
    dataset: SegDataset,
    indices: Sequence[int],
    rng: Optional[np.random.Generator] = None,
    flip_probability: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack images and labels; with an rng each image is flipped independently."""
    images = [dataset[int(i)] for i in indices]
    if rng is not None:
        images = [augment(img, rng, flip_probability) for img in images]
    x = np.stack([img.image for img in images])
    y = np.stack([img.labels for img in images])
    return x, y


def check_finite(stage: str, epoch: int, iteration: int, **components: float) -> None:
    """Raise DivergenceError if any loss component is NaN or infinite."""
    if not all(math.isfinite(v) for v in components.values()):
        logger.error(f"{stage}: non-finite loss at epoch {epoch}, iteration {iteration}: {components}")
        raise DivergenceError(stage, epoch, iteration, components)


def chunks(n: int, size: int = EVAL_BATCH) -> Iterator[np.ndarray]:
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def inference_pass(
    model: SegModel,
    dataset: SegDataset,
    fn: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], T],
    batch_size: int = EVAL_BATCH,
) -> List[T]:
    """
    Evaluation-mode forward over the dataset in order.

    fn(indices, logits, feature, labels) is called per chunk and its results are
    returned in order; nothing is recorded on any tape.
    """
    results: List[T] = []
    with no_grad(), evaluating(model):
        for idx in chunks(len(dataset), batch_size):
            x, y = load_batch(dataset, idx)
            logits, feature = model(Tensor(x))
            results.append(fn(idx, logits.data, feature.data, y))
    return results


def predict_logits(model: SegModel, dataset: SegDataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """N×C×H×W logits of the whole dataset."""
    parts = inference_pass(model, dataset, lambda idx, logits, feat, y: logits, batch_size)
    return np.concatenate(parts)


def mean_or_zero(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0
