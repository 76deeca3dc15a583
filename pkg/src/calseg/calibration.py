"""
Expected calibration error, reliability diagrams and the differentiable ECE loss

Bins are right-closed, ((m-1)/M, m/M], with confidence exactly 0 in the first bin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .autodiff import Tensor, default_dtype, gradcheck  # noqa: E402
from .autodiff import functional as F  # noqa: E402
from .datagen import IGNORE_LABEL  # noqa: E402
from .errors import ArtifactIOError, EmptyInputError, FormatError, RangeError, ShapeError  # noqa: E402

logger = logging.getLogger(__name__)

RELIABILITY_COLUMNS = ["bin_lo", "bin_hi", "count", "conf", "acc"]
EXACT_FLOAT = "%.17g"

plt.rcParams["svg.hashsalt"] = "calseg"


@dataclass
class ReliabilityDiagram:
    """Per-bin sample count, mean confidence and accuracy; empty bins hold zeros."""

    counts: np.ndarray
    conf: np.ndarray
    acc: np.ndarray

    @property
    def bins(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bins + 1)

    @property
    def ece(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.sum(self.counts / self.n * np.abs(self.acc - self.conf)))

    def to_frame(self) -> pd.DataFrame:
        edges = self.edges
        return pd.DataFrame(
            {
                "bin_lo": edges[:-1],
                "bin_hi": edges[1:],
                "count": self.counts.astype(np.int64),
                "conf": self.conf,
                "acc": self.acc,
            },
            columns=RELIABILITY_COLUMNS,
        )


def bin_index(confidence: np.ndarray, bins: int) -> np.ndarray:
    """0-based bin of every confidence under the right-closed convention."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, bins - 1)


def reliability_diagram(confidence: np.ndarray, correct: np.ndarray, bins: int = 10) -> ReliabilityDiagram:
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.shape != hit.shape:
        raise ShapeError(f"confidence {conf.shape} and correctness {hit.shape} differ")
    if conf.size == 0:
        raise EmptyInputError("ECE of an empty sample set")
    if bins < 1:
        raise RangeError(f"bin count must be >= 1, got {bins}")
    if not np.all(np.isfinite(conf)) or conf.min() < 0.0 or conf.max() > 1.0:
        raise RangeError("confidences must lie in [0, 1]")
    idx = bin_index(conf, bins)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=hit, minlength=bins)
    nonzero = counts > 0
    mean_conf = np.zeros(bins)
    mean_acc = np.zeros(bins)
    mean_conf[nonzero] = conf_sum[nonzero] / counts[nonzero]
    mean_acc[nonzero] = acc_sum[nonzero] / counts[nonzero]
    return ReliabilityDiagram(counts=counts, conf=mean_conf, acc=mean_acc)


def merge_diagrams(diagrams: Sequence[ReliabilityDiagram]) -> ReliabilityDiagram:
    """Pool diagrams over the same bins: counts add, conf and acc become count-weighted means."""
    if not diagrams:
        raise EmptyInputError("no reliability diagrams to merge")
    bins = {d.bins for d in diagrams}
    if len(bins) != 1:
        raise ShapeError(f"cannot merge diagrams with different bin counts {sorted(bins)}")
    counts = np.sum([d.counts for d in diagrams], axis=0).astype(np.int64)
    conf_sum = np.sum([d.counts * d.conf for d in diagrams], axis=0)
    acc_sum = np.sum([d.counts * d.acc for d in diagrams], axis=0)
    safe = np.maximum(counts, 1)
    return ReliabilityDiagram(
        counts=counts,
        conf=np.where(counts > 0, conf_sum / safe, 0.0),
        acc=np.where(counts > 0, acc_sum / safe, 0.0),
    )


def compute_ece(
    confidence: np.ndarray, correct: np.ndarray, bins: int = 10
) -> tuple[float, ReliabilityDiagram]:
    """
    Σ_m |B_m|/n · |acc(B_m) − conf(B_m)| over fixed-width bins.

    Raises:
        EmptyInputError: no samples
        RangeError: confidence outside [0, 1]
    """
    diagram = reliability_diagram(confidence, correct, bins)
    return diagram.ece, diagram


def confidence_and_prediction(logits: Union[Tensor, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and argmax class per pixel; ties go to the lowest class."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim != 4:
        raise ShapeError(f"expected N×C×H×W logits, got {z.shape}")
    probs = F._softmax_np(z.astype(np.float64), axis=1)
    return probs.max(axis=1), probs.argmax(axis=1)


def _valid_mask(labels: np.ndarray, num_classes: int) -> np.ndarray:
    valid = labels != IGNORE_LABEL
    if np.any(labels[valid] >= num_classes):
        raise ShapeError(f"labels outside 0..{num_classes - 1} (and not {IGNORE_LABEL})")
    return valid


def diff_ece_loss(
    logits: Tensor,
    labels: np.ndarray,
    bins: int = 10,
    temperature: float = 1e-5,
) -> Tensor:
    """
    Differentiable ECE over the non-ignored pixels of a batch.

    Each pixel's confidence is the temperature-t LogSumExp of its softmax
    probabilities. Bin membership is read off those values but is not part of
    the graph; gradients reach the logits through the per-bin confidence sums.

    Raises:
        EmptyInputError: every pixel carries the ignore label
    """
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not match")
    valid = _valid_mask(labels, logits.shape[1])
    if not valid.any():
        raise EmptyInputError("differentiable ECE with every pixel ignored")

    probs = F.softmax(logits, axis=1)
    smooth = F.logsumexp(probs, temperature, axis=1)
    conf = F.take(smooth, F.pixel_index(valid))
    n = conf.size

    correct = (logits.data.argmax(axis=1) == labels)[valid].astype(np.float64)
    idx = bin_index(np.clip(conf.data, 0.0, 1.0), bins)

    total: Tensor | None = None
    for m in np.unique(idx):
        members = np.flatnonzero(idx == m)
        conf_sum = F.sum(F.take(conf, members))
        gap = F.abs(F.sub(float(correct[members].sum()), conf_sum))
        total = gap if total is None else F.add(total, gap)
    assert total is not None
    return F.div(total, float(n))


def diff_ece_gradcheck(instances: int = 20, seed: int = 0, bins: int = 10, temperature: float = 1e-2) -> float:
    """
    Worst relative error of diff_ece_loss gradients against central differences
    over random float64 batches. Batches with a confidence within 1e-3 of a bin
    edge are redrawn, since a finite-difference step could move it across.
    """
    rng = np.random.default_rng(seed)
    edges = np.linspace(0.0, 1.0, bins + 1)
    worst = 0.0
    with default_dtype(np.float64):
        done = 0
        while done < instances:
            z = rng.normal(size=(2, 4, 3, 3)) * 2.0
            labels = rng.integers(0, 4, size=(2, 3, 3))
            probs = F._softmax_np(z, 1)
            smooth = temperature * np.log(np.exp(probs / temperature).sum(axis=1))
            top2 = np.sort(probs, axis=1)[:, -2:]
            if np.min(np.abs(smooth[..., None] - edges)) < 1e-3 or np.min(top2[:, 1] - top2[:, 0]) < 1e-3:
                continue
            logits = Tensor(z)
            worst = max(worst, gradcheck(lambda x=logits, y=labels: diff_ece_loss(x, y, bins, temperature), [logits]))
            done += 1
    logger.info(f"gradcheck diff_ece_loss: worst rel err {worst:.3e} over {instances} instances")
    return worst


def ece_per_image(
    logits: Union[Tensor, np.ndarray], labels: np.ndarray, bins: int = 10
) -> np.ndarray:
    """
    ECE computed independently on each image's non-ignored pixels.

    Raises:
        EmptyInputError: an image with no valid pixels
    """
    conf, pred = confidence_and_prediction(logits)
    valid = _valid_mask(labels, (logits.data if isinstance(logits, Tensor) else logits).shape[1])
    out = np.empty(conf.shape[0])
    for i in range(conf.shape[0]):
        if not valid[i].any():
            raise EmptyInputError(f"image {i} has no valid pixels")
        out[i], _ = compute_ece(conf[i][valid[i]], (pred[i] == labels[i])[valid[i]], bins)
    return out


def export_reliability(diagram: ReliabilityDiagram, path: Union[str, Path], title: str = "") -> tuple[Path, Path]:
    """
    Write <path>.csv (bin_lo, bin_hi, count, conf, acc) and a matching <path>.svg bar chart.

    Raises:
        ArtifactIOError: the files cannot be written
    """
    stem = Path(path).with_suffix("")
    csv_path, svg_path = stem.with_suffix(".csv"), stem.with_suffix(".svg")
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        diagram.to_frame().to_csv(csv_path, index=False, float_format=EXACT_FLOAT, lineterminator="\n")
        _plot_reliability(diagram, svg_path, title)
    except OSError as e:
        raise ArtifactIOError(f"cannot write reliability diagram to {stem}: {e}") from e
    return csv_path, svg_path


def _plot_reliability(diagram: ReliabilityDiagram, svg_path: Path, title: str) -> None:
    edges = diagram.edges
    width = 1.0 / diagram.bins
    centers = edges[:-1] + width / 2

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.bar(centers, diagram.acc, width=width, edgecolor="black", color="tab:blue", label="accuracy")
    shown = diagram.counts > 0
    ax.bar(
        centers[shown],
        (diagram.conf - diagram.acc)[shown],
        bottom=diagram.acc[shown],
        width=width,
        edgecolor="tab:red",
        color="tab:red",
        alpha=0.3,
        label="gap",
    )
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", label="perfect calibration")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{title} ECE={diagram.ece:.4f}".strip())
    ax.legend(loc="upper left")
    fig.savefig(svg_path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def read_reliability_csv(path: Union[str, Path]) -> ReliabilityDiagram:
    """
    Inverse of the CSV half of export_reliability.

    Raises:
        FormatError: missing columns
    """
    path = Path(path)
    frame = pd.read_csv(path)
    missing = [c for c in RELIABILITY_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(path, f"missing reliability columns {missing}")
    return ReliabilityDiagram(
        counts=frame["count"].to_numpy(dtype=np.int64),
        conf=frame["conf"].to_numpy(dtype=np.float64),
        acc=frame["acc"].to_numpy(dtype=np.float64),
    )
