"""
Target stage: calibration-guided self-training without source data

Each round re-estimates per-image ECE with the value net, scales pixel
confidences by (1 − ECÊ), keeps the top-δ of every predicted class both over
the whole target set and within each image, and trains on the fused
pseudo-labels. The first epoch of a round is a statistic warm-up touching only
BatchNorm; the adapted model is the epoch with the lowest mean prediction
entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from .autodiff import GradientTape, Tensor, no_grad
from .autodiff import functional as F
from .calibration import confidence_and_prediction
from .checkpoint import CheckpointMeta, save_checkpoint
from .config import CalibConfig, TargetConfig
from .datagen import IGNORE_LABEL, SegDataset, write_dataset
from .errors import EmptyInputError, RangeError, ShapeError
from .evaluation import evaluate_model
from .model import SegModel, Stage, StateDict, ValueNet, evaluating, require_stage, set_stage_masks
from .optim import SGD, poly_lr
from .training import check_finite, inference_pass, load_batch, make_batches
from .utils.metrics_csv import FLOAT_FORMAT, MetricsLog
from .utils.rng import RngStreams

logger = logging.getLogger(__name__)

RCE_LOG_FLOOR = 1e-4
NEG_PROB_CAP = 1.0 - 1e-7
ECE_HAT_RANGE = (0.01, 0.99)

UNLABELED, GLOBAL, LOCAL, BOTH = 0, 1, 2, 3

EntropyMode = Literal["eval", "train"]


@dataclass
class ClassThresholds:
    """Per-class threshold ξ on adjusted confidence and the loss weights softmax(ξ)."""

    xi: np.ndarray
    weights: np.ndarray
    member_counts: np.ndarray

    @classmethod
    def from_xi(cls, xi: np.ndarray, member_counts: np.ndarray) -> "ClassThresholds":
        xi = np.asarray(xi, dtype=np.float64)
        e = np.exp(xi - xi.max())
        return cls(xi=xi, weights=e / e.sum(), member_counts=np.asarray(member_counts, dtype=np.int64))


@dataclass
class PseudoLabelMap:
    """Pseudo-labels (255 = unlabeled) and which rule labeled each pixel."""

    labels: np.ndarray  # N×H×W uint8
    provenance: np.ndarray  # N×H×W uint8: 0 unlabeled, 1 global, 2 local, 3 both
    thresholds: ClassThresholds

    def labeled_fraction(self, num_classes: int, pred: np.ndarray) -> np.ndarray:
        """Share of each class's predicted pixels that received a label."""
        members = np.bincount(pred.reshape(-1), minlength=num_classes)[:num_classes]
        labeled = self.labels[self.labels != IGNORE_LABEL]
        counts = np.bincount(labeled, minlength=num_classes)[:num_classes]
        return np.divide(counts, members, out=np.zeros(num_classes), where=members > 0)


def clamp_ece_hat(ece_hat: np.ndarray) -> np.ndarray:
    """Keep value-net estimates away from 0 and 1 so (1 − ECÊ) never vanishes."""
    return np.clip(ece_hat, *ECE_HAT_RANGE)


def adjusted_confidence(p: np.ndarray, ece_hat: np.ndarray) -> np.ndarray:
    """
    P = (1 − ECÊ)·p with one ECÊ per image broadcast over its pixels.

    Raises:
        RangeError: p or ECÊ outside [0, 1]
    """
    p = np.asarray(p, dtype=np.float64)
    ece_hat = np.asarray(ece_hat, dtype=np.float64).reshape(-1)
    if p.shape[0] != ece_hat.shape[0]:
        raise ShapeError(f"{p.shape[0]} images but {ece_hat.shape[0]} ECE estimates")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise RangeError("confidences must lie in [0, 1]")
    if ece_hat.min() < 0.0 or ece_hat.max() > 1.0:
        raise RangeError("ECE estimates must lie in [0, 1]")
    return (1.0 - ece_hat).reshape((-1,) + (1,) * (p.ndim - 1)) * p


def top_delta_threshold(values: np.ndarray, delta: float) -> float:
    """
    Threshold at 0-based rank min(floor(δ·m), m−1) of values sorted descending.

    Exactly the values strictly above it pass (when values are distinct), so at
    δ = 1 the smallest member stays unlabeled.
    """
    m = values.size
    ranked = np.sort(values)[::-1]
    return float(ranked[min(int(math.floor(delta * m)), m - 1)])


def compute_class_thresholds(
    adjusted: np.ndarray, pred: np.ndarray, delta: float, num_classes: int
) -> ClassThresholds:
    """
    Global per-class thresholds over every pixel of the dataset.

    Classes never predicted get ξ = 1 (nothing passes).

    Raises:
        EmptyInputError: no pixels
        RangeError: δ outside (0, 1]
    """
    if adjusted.size == 0:
        raise EmptyInputError("pseudo-label thresholds of an empty dataset")
    if not 0.0 < delta <= 1.0:
        raise RangeError(f"delta must be in (0, 1], got {delta}")
    flat_p = adjusted.reshape(-1)
    flat_c = pred.reshape(-1)
    xi = np.ones(num_classes)
    counts = np.bincount(flat_c, minlength=num_classes)[:num_classes]
    for c in range(num_classes):
        if counts[c] == 0:
            logger.warning(f"class {c} has no predicted pixels; threshold set to 1")
            continue
        xi[c] = top_delta_threshold(flat_p[flat_c == c], delta)
    return ClassThresholds.from_xi(xi, counts)


def assign_pseudo_labels(
    adjusted: np.ndarray, pred: np.ndarray, thresholds: ClassThresholds, delta: float
) -> PseudoLabelMap:
    """
    Label a pixel with its predicted class when its adjusted confidence is above
    the global ξ of that class or above the same top-δ threshold computed inside
    its own image; everything else is 255.
    """
    if adjusted.shape != pred.shape:
        raise ShapeError(f"confidence {adjusted.shape} and prediction {pred.shape} differ")
    global_pass = adjusted > thresholds.xi[pred]
    local_pass = np.zeros_like(global_pass)
    for i in range(pred.shape[0]):
        p_i, c_i = adjusted[i], pred[i]
        for c in np.unique(c_i):
            members = c_i == c
            local_pass[i][members] = p_i[members] > top_delta_threshold(p_i[members], delta)
    provenance = (global_pass.astype(np.uint8) * GLOBAL) | (local_pass.astype(np.uint8) * LOCAL)
    labels = np.where(provenance != UNLABELED, pred, IGNORE_LABEL).astype(np.uint8)
    return PseudoLabelMap(labels=labels, provenance=provenance, thresholds=thresholds)


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------


def _labeled(logits: Tensor, pseudo: np.ndarray) -> np.ndarray:
    if pseudo.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"pseudo-labels {pseudo.shape} do not match logits {logits.shape}")
    valid = pseudo != IGNORE_LABEL
    if not valid.any():
        raise EmptyInputError("no pseudo-labeled pixels")
    return valid


def sce_components(
    logits: Tensor, pseudo: np.ndarray, weights: np.ndarray, epsilon: float
) -> tuple[Tensor, Tensor, Tensor]:
    """(L_sce, L_wCE, L_rCE) over the pseudo-labeled pixels."""
    valid = _labeled(logits, pseudo)
    idx = F.class_index(logits.shape, pseudo, valid)
    w = np.asarray(weights, dtype=logits.data.dtype)[pseudo[valid].astype(np.int64)]
    log_f = F.take(F.log_softmax(logits, axis=1), idx)
    l_wce = F.neg(F.mean(F.mul(log_f, w)))
    f = F.take(F.softmax(logits, axis=1), idx)
    # one-hot target: only the (1 − f_ŷ) mass meets the clamped log
    l_rce = F.mul(F.mean(F.sub(1.0, f)), -math.log(RCE_LOG_FLOOR))
    if epsilon == 0:
        return l_rce, l_wce, l_rce
    return F.add(F.mul(l_wce, epsilon), l_rce), l_wce, l_rce


def sce_loss(logits: Tensor, pseudo: np.ndarray, weights: np.ndarray, epsilon: float) -> Tensor:
    """
    ε·L_wCE + L_rCE on pseudo-labeled pixels.

    Raises:
        EmptyInputError: no pseudo-labeled pixels
    """
    return sce_components(logits, pseudo, weights, epsilon)[0]


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean over pixels of −Σ_c f·log f; 0·log 0 counts as 0."""
    n, _, h, w = logits.shape
    plogp = F.mul(F.softmax(logits, axis=1), F.log_softmax(logits, axis=1))
    return F.div(F.neg(F.sum(plogp)), float(n * h * w))


def sample_complementary(pseudo: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn class ≠ ŷ for every labeled pixel (255 elsewhere)."""
    if num_classes < 2:
        raise RangeError("negative learning needs at least 2 classes")
    valid = pseudo != IGNORE_LABEL
    out = np.full(pseudo.shape, IGNORE_LABEL, dtype=np.int64)
    offsets = rng.integers(1, num_classes, size=int(valid.sum()))
    out[valid] = (pseudo[valid].astype(np.int64) + offsets) % num_classes
    return out


def negative_loss(
    logits: Tensor,
    pseudo: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    complementary: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean of −log(1 − f_ȳ) over labeled pixels, f_ȳ capped at 1 − 1e-7.

    ȳ is drawn with rng unless given explicitly.

    Raises:
        RangeError: fewer than 2 classes
        EmptyInputError: no pseudo-labeled pixels
    """
    c = logits.shape[1]
    if c < 2:
        raise RangeError("negative learning needs at least 2 classes")
    valid = _labeled(logits, pseudo)
    if complementary is None:
        if rng is None:
            raise ValueError("negative_loss needs an rng or explicit complementary classes")
        complementary = sample_complementary(pseudo, c, rng)
    f_bar = F.take(F.softmax(logits, axis=1), F.class_index(logits.shape, complementary, valid))
    capped = F.clip(f_bar, 0.0, NEG_PROB_CAP)
    return F.neg(F.mean(F.log(F.sub(1.0, capped))))


@dataclass
class TargetLoss:
    total: Tensor
    parts: Dict[str, float]


def target_loss(
    logits: Tensor,
    pseudo: np.ndarray,
    weights: np.ndarray,
    cfg: TargetConfig,
    rng: np.random.Generator,
) -> TargetLoss:
    """
    L_tar = L_sce + L_neg + η·L_ent; a batch without pseudo-labels keeps only the
    entropy term. With cfg.symmetric off the weighted CE alone replaces L_sce and
    is reported under l_sce.
    """
    l_ent = entropy_loss(logits)
    entropy_term = F.mul(l_ent, cfg.eta)
    parts = {"l_ent": l_ent.item(), "l_sce": 0.0, "l_neg": 0.0}
    if not (pseudo != IGNORE_LABEL).any():
        return TargetLoss(entropy_term, parts)
    l_sce, l_wce, _ = sce_components(logits, pseudo, weights, cfg.epsilon)
    if not cfg.symmetric:
        l_sce = l_wce
    l_neg = negative_loss(logits, pseudo, rng)
    parts.update(l_sce=l_sce.item(), l_neg=l_neg.item())
    return TargetLoss(F.add(F.add(l_sce, l_neg), entropy_term), parts)


# ----------------------------------------------------------------------------
# Rounds
# ----------------------------------------------------------------------------


@dataclass
class RoundLabels:
    pseudo: PseudoLabelMap
    prediction: np.ndarray
    ece_hat: np.ndarray


def estimate_pseudo_labels(
    model: SegModel,
    valuenet: ValueNet,
    dataset: SegDataset,
    delta: float,
    ece_guided: bool = True,
) -> RoundLabels:
    """
    Eval-mode pass: ECÊ per image, adjusted confidences, thresholds and fused
    pseudo-labels. With ece_guided off the thresholds read the raw confidence.
    """

    def per_chunk(idx: np.ndarray, logits: np.ndarray, feature: np.ndarray, y: np.ndarray) -> tuple:
        conf, pred = confidence_and_prediction(logits)
        with evaluating(valuenet):
            ece_hat = valuenet(Tensor(feature)).data.astype(np.float64)
        return conf, pred, ece_hat

    parts = inference_pass(model, dataset, per_chunk)
    conf = np.concatenate([p[0] for p in parts])
    pred = np.concatenate([p[1] for p in parts])
    ece_hat = clamp_ece_hat(np.concatenate([p[2] for p in parts]))
    adjusted = adjusted_confidence(conf, ece_hat) if ece_guided else conf
    thresholds = compute_class_thresholds(adjusted, pred, delta, dataset.num_classes)
    pseudo = assign_pseudo_labels(adjusted, pred, thresholds, delta)
    return RoundLabels(pseudo=pseudo, prediction=pred, ece_hat=ece_hat)


def persist_pseudo_labels(round_dir: Path, dataset: SegDataset, labels: RoundLabels) -> None:
    """pseudo/ records, provenance.npy and thresholds.csv for one round."""
    round_dir.mkdir(parents=True, exist_ok=True)
    write_dataset(
        dataset.with_labels(list(labels.pseudo.labels), name=f"{dataset.name}-pseudo"),
        round_dir / "pseudo",
        force=True,
    )
    np.save(round_dir / "provenance.npy", labels.pseudo.provenance)
    th = labels.pseudo.thresholds
    frame = pd.DataFrame(
        {
            "class": np.arange(dataset.num_classes),
            "xi": th.xi,
            "weight": th.weights,
            "members": th.member_counts,
            "labeled_fraction": labels.pseudo.labeled_fraction(dataset.num_classes, labels.prediction),
        }
    )
    frame.to_csv(round_dir / "thresholds.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def mean_prediction_entropy(model: SegModel, dataset: SegDataset) -> float:
    """Mean per-pixel entropy of the eval-mode predictions over the whole dataset."""

    def per_chunk(idx: np.ndarray, logits: np.ndarray, feature: np.ndarray, y: np.ndarray) -> float:
        return entropy_loss(Tensor(logits.astype(np.float64), dtype=np.float64)).item() * len(idx)

    return float(sum(inference_pass(model, dataset, per_chunk)) / len(dataset))


@dataclass
class EpochStats:
    losses: Dict[str, float]
    train_entropy: float
    lr: float
    iterations: int


def _train_epoch(
    phase: Stage,
    model: SegModel,
    pseudo_set: SegDataset,
    weights: np.ndarray,
    optimizer: SGD,
    cfg: TargetConfig,
    base_lr: float,
    iteration: int,
    max_iterations: int,
    rng_shuffle: np.random.Generator,
    rng_augment: np.random.Generator,
    rng_negative: np.random.Generator,
    flip_probability: float,
    round_index: int,
    epoch: int,
    valuenet: Optional[ValueNet] = None,
) -> EpochStats:
    sums = {"l_sce": 0.0, "l_neg": 0.0, "l_ent": 0.0}
    entropy_weighted = 0.0
    batches = make_batches(len(pseudo_set), cfg.batch_size, rng_shuffle)
    for batch in batches:
        x, y = load_batch(pseudo_set, batch, rng_augment, flip_probability)
        optimizer.lr = poly_lr(base_lr, iteration, max_iterations, cfg.poly_power)
        with GradientTape() as tape:
            logits, feature = model(Tensor(x))
            loss = target_loss(logits, y, weights, cfg, rng_negative)
        if valuenet is not None:
            # value-net BN layers follow the target statistics during warm-up
            with no_grad():
                valuenet(Tensor(feature.data))
        check_finite(f"adapt[{phase.value}]", epoch, iteration, **loss.parts)
        tape.backward(loss.total)
        optimizer.step()
        optimizer.zero_grad()
        for k in sums:
            sums[k] += loss.parts[k]
        entropy_weighted += loss.parts["l_ent"] * len(batch)
        iteration += 1
        logger.debug(f"round {round_index} epoch {epoch} it {iteration}: {loss.parts}")
    n = len(batches)
    return EpochStats(
        losses={k: v / n for k, v in sums.items()},
        train_entropy=entropy_weighted / len(pseudo_set),
        lr=optimizer.lr,
        iterations=iteration,
    )


def statistic_warmup(
    model: SegModel,
    valuenet: ValueNet,
    pseudo_set: SegDataset,
    weights: np.ndarray,
    cfg: TargetConfig,
    streams: RngStreams,
    lr: Optional[float] = None,
    iteration: int = 0,
    max_iterations: int = 0,
    flip_probability: float = 0.5,
    round_index: int = 1,
) -> EpochStats:
    """
    One epoch in which only BatchNorm moves: running statistics of every BN layer
    (segmentation and value net) track the target batches, and γ, β take one SGD
    step per batch on L_tar.

    Raises:
        StageMaskError: masks are not those of stage "warmup"
    """
    require_stage(model, valuenet, Stage.WARMUP)
    if lr is None:
        lr = cfg.warmup_lr if cfg.warmup_lr is not None else cfg.lr
    base_lr = lr
    affine = [p for p in model.parameters() + valuenet.parameters() if p.is_bn_affine]
    optimizer = SGD(affine, lr=base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return _train_epoch(
        Stage.WARMUP,
        model,
        pseudo_set,
        weights,
        optimizer,
        cfg,
        base_lr,
        iteration,
        max_iterations,
        streams.get("shuffle"),
        streams.get("augment"),
        streams.get("negative"),
        flip_probability,
        round_index,
        1,
        valuenet=valuenet,
    )


@dataclass
class TargetEpochRecord:
    """One adaptation epoch (warm-up epochs included)."""

    round: int
    epoch: int
    phase: str
    mean_entropy: float
    losses: Dict[str, float]
    seg_state: StateDict
    value_state: StateDict
    monitor_miou: float = float("nan")
    path: Optional[Path] = None


def select_by_entropy(entropies: Sequence[float]) -> int:
    """Index of the smallest entropy; ties go to the earliest epoch."""
    if len(entropies) == 0:
        raise EmptyInputError("no epochs to select from")
    return int(np.argmin(np.asarray(entropies, dtype=np.float64)))


def select_by_target_miou(records: Sequence[TargetEpochRecord]) -> int:
    """Oracle: index of the highest monitored target mIoU (evaluation reports only)."""
    if len(records) == 0:
        raise EmptyInputError("no epochs to select from")
    scores = np.asarray([r.monitor_miou for r in records], dtype=np.float64)
    if np.all(np.isnan(scores)):
        raise EmptyInputError("no monitored mIoU recorded")
    return int(np.nanargmax(scores))


@dataclass
class AdaptResult:
    records: List[TargetEpochRecord] = field(default_factory=list)
    selected: Optional[int] = None
    oracle: Optional[int] = None
    thresholds: List[ClassThresholds] = field(default_factory=list)

    @property
    def selected_record(self) -> Optional[TargetEpochRecord]:
        return None if self.selected is None else self.records[self.selected]


def adapt_columns(num_classes: int) -> List[str]:
    return [
        "round",
        "epoch",
        "phase",
        "lr",
        "l_sce",
        "l_neg",
        "l_ent",
        "mean_entropy",
        "monitor_miou",
    ] + [f"labeled_fraction_{c}" for c in range(num_classes)]


def adapt(
    target_train: SegDataset,
    model: SegModel,
    valuenet: ValueNet,
    cfg: TargetConfig,
    calib: CalibConfig,
    streams: RngStreams,
    out_dir: Optional[Path] = None,
    monitor: Optional[SegDataset] = None,
    flip_probability: float = 0.5,
) -> AdaptResult:
    """
    Run cfg.rounds rounds of pseudo-labeling, warm-up and adaptation, then load
    the lowest-entropy epoch into model (and valuenet). cfg.statistic_warmup,
    cfg.ece_guided and cfg.symmetric switch those components off for ablations.

    With rounds = 0 nothing changes and no epoch is recorded. `monitor` is a
    labeled split whose mIoU is logged per epoch for the oracle comparison; it
    never influences training or selection.

    Raises:
        DivergenceError: a non-finite loss
    """
    result = AdaptResult()
    if cfg.rounds == 0:
        logger.info("adapt: 0 rounds, keeping the source model")
        return result

    c = target_train.num_classes
    log = MetricsLog(out_dir / "metrics.csv", adapt_columns(c)) if out_dir else None
    iters_per_epoch = len(make_batches(len(target_train), cfg.batch_size))
    first_epoch = 1 if cfg.statistic_warmup else 2
    max_iterations = cfg.rounds * (cfg.epochs_per_round + 2 - first_epoch) * iters_per_epoch
    iteration = 0
    rng_shuffle = streams.get("shuffle")
    rng_augment = streams.get("augment")
    rng_negative = streams.get("negative")

    for r in range(1, cfg.rounds + 1):
        set_stage_masks(model, valuenet, Stage.ADAPT)
        labels = estimate_pseudo_labels(model, valuenet, target_train, cfg.delta, cfg.ece_guided)
        result.thresholds.append(labels.pseudo.thresholds)
        fractions = labels.pseudo.labeled_fraction(c, labels.prediction)
        logger.info(
            f"round {r}: ECE_hat mean={labels.ece_hat.mean():.4f}, xi={np.round(labels.pseudo.thresholds.xi, 4).tolist()}, "
            f"labeled={np.round(fractions, 3).tolist()}"
        )
        round_dir = out_dir / f"round_{r}" if out_dir else None
        if round_dir is not None:
            persist_pseudo_labels(round_dir, target_train, labels)
        pseudo_set = target_train.with_labels(list(labels.pseudo.labels), name=f"{target_train.name}-r{r}")
        weights = labels.pseudo.thresholds.weights
        optimizer: Optional[SGD] = None

        # epoch 1 is always the warm-up slot, skipped when it is switched off
        for epoch in range(first_epoch, cfg.epochs_per_round + 2):
            if epoch == 1:
                set_stage_masks(model, valuenet, Stage.WARMUP)
                stats = statistic_warmup(
                    model,
                    valuenet,
                    pseudo_set,
                    weights,
                    cfg,
                    streams,
                    iteration=iteration,
                    max_iterations=max_iterations,
                    flip_probability=flip_probability,
                    round_index=r,
                )
                phase = Stage.WARMUP
            else:
                set_stage_masks(model, valuenet, Stage.ADAPT)
                if optimizer is None:
                    trainable = [p for p in model.parameters() if p.trainable]
                    optimizer = SGD(trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
                stats = _train_epoch(
                    Stage.ADAPT,
                    model,
                    pseudo_set,
                    weights,
                    optimizer,
                    cfg,
                    cfg.lr,
                    iteration,
                    max_iterations,
                    rng_shuffle,
                    rng_augment,
                    rng_negative,
                    flip_probability,
                    r,
                    epoch,
                )
                phase = Stage.ADAPT
            iteration = stats.iterations

            if cfg.entropy_mode == "eval":
                entropy = mean_prediction_entropy(model, target_train)
            else:
                entropy = stats.train_entropy
            monitor_miou = evaluate_model(model, monitor, calib.bins).iou.miou if monitor is not None else float("nan")
            record = TargetEpochRecord(
                round=r,
                epoch=epoch,
                phase=phase.value,
                mean_entropy=entropy,
                losses=stats.losses,
                seg_state=model.state_dict(),
                value_state=valuenet.state_dict(),
                monitor_miou=monitor_miou,
            )
            if round_dir is not None:
                record.path = save_checkpoint(
                    round_dir / f"epoch_{epoch:03d}.ckpt",
                    model,
                    valuenet,
                    CheckpointMeta(
                        stage=Stage.ADAPT.value,
                        epoch=epoch,
                        round=r,
                        metrics={"mean_entropy": entropy, **stats.losses},
                        notes={"phase": phase.value},
                    ),
                )
            result.records.append(record)
            if log is not None:
                log.append(
                    round=r,
                    epoch=epoch,
                    phase=phase.value,
                    lr=stats.lr,
                    mean_entropy=entropy,
                    monitor_miou=monitor_miou,
                    **stats.losses,
                    **{f"labeled_fraction_{k}": float(v) for k, v in enumerate(fractions)},
                )
            logger.info(
                f"round {r} epoch {epoch} ({phase.value}): L_sce={stats.losses['l_sce']:.4f} "
                f"L_neg={stats.losses['l_neg']:.4f} L_ent={stats.losses['l_ent']:.4f} entropy={entropy:.4f}"
            )

    result.selected = select_by_entropy([rec.mean_entropy for rec in result.records])
    if monitor is not None:
        result.oracle = select_by_target_miou(result.records)
    chosen = result.records[result.selected]
    model.load_state_dict(chosen.seg_state)
    valuenet.load_state_dict(chosen.value_state)
    set_stage_masks(model, valuenet, Stage.ADAPT)
    logger.info(f"adapt: selected round {chosen.round} epoch {chosen.epoch} (entropy {chosen.mean_entropy:.4f})")
    return result
