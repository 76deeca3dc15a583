"""
Source stage: calibration-aware pre-training, checkpoint selection, value net

Training minimizes L_seg + α·L_ECE_diff; the ECE term joins after a few
cross-entropy-only epochs and can be switched off. Every epoch leaves one
checkpoint with per-image ECE statistics on the held-out source subset, and
the selected checkpoint minimizes mean + max + min of those.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np

from .autodiff import GradientTape, Tensor, no_grad
from .autodiff import functional as F
from .calibration import diff_ece_loss, ece_per_image
from .checkpoint import CheckpointMeta, save_checkpoint
from .config import CalibConfig, SourceConfig, ValueNetConfig
from .datagen import IGNORE_LABEL, SegDataset
from .errors import EmptyInputError, RangeError, ShapeError
from .evaluation import evaluate_model
from .model import SegModel, Stage, StateDict, ValueNet, evaluating, require_stage, set_stage_masks
from .optim import SGD, poly_lr
from .training import EVAL_BATCH, check_finite, chunks, inference_pass, load_batch, make_batches
from .utils.metrics_csv import MetricsLog
from .utils.rng import RngStreams

logger = logging.getLogger(__name__)

SOURCE_COLUMNS = ["epoch", "lr", "l_seg", "l_ece_diff", "val_ece_mean", "val_ece_max", "val_ece_min", "source_miou"]
VALUENET_COLUMNS = ["epoch", "lr", "train_l_match", "val_l_match", "val_ece_variance"]

SelectionCriterion = Literal["ece", "source_miou", "target_miou"]


@dataclass
class CheckpointRecord:
    """One source epoch: parameter snapshot plus the statistics selection reads."""

    stage: str
    epoch: int
    state: StateDict
    ece_mean: float
    ece_max: float
    ece_min: float
    l_seg: float
    l_ece_diff: float
    source_miou: float
    target_miou: Optional[float] = None
    path: Optional[Path] = None

    @property
    def ece_score(self) -> float:
        return self.ece_mean + self.ece_max + self.ece_min

    def metrics(self) -> Dict[str, float]:
        return {
            "l_seg": self.l_seg,
            "l_ece_diff": self.l_ece_diff,
            "val_ece_mean": self.ece_mean,
            "val_ece_max": self.ece_max,
            "val_ece_min": self.ece_min,
            "source_miou": self.source_miou,
        }


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean pixel cross-entropy over non-ignored pixels.

    Raises:
        EmptyInputError: every pixel is ignored
    """
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE_LABEL
    if not valid.any():
        raise EmptyInputError("cross-entropy with every pixel ignored")
    log_probs = F.log_softmax(logits, axis=1)
    picked = F.take(log_probs, F.class_index(logits.shape, labels, valid))
    return F.neg(F.mean(picked))


def train_source(
    train: SegDataset,
    val: SegDataset,
    model: SegModel,
    cfg: SourceConfig,
    calib: CalibConfig,
    streams: RngStreams,
    checkpoint_dir: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    flip_probability: float = 0.5,
) -> List[CheckpointRecord]:
    """
    SGD on L_seg + α·L_ECE_diff with poly LR decay; one CheckpointRecord per epoch.

    Raises:
        EmptyInputError: empty train or val set
        DivergenceError: a non-finite loss
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyInputError("source training needs non-empty train and validation sets")
    set_stage_masks(model, None, Stage.SOURCE)
    optimizer = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = streams.get("shuffle")
    augment_rng = streams.get("augment")
    log = MetricsLog(metrics_path, SOURCE_COLUMNS) if metrics_path else None

    iters_per_epoch = len(make_batches(len(train), cfg.batch_size))
    max_iterations = cfg.epochs * iters_per_epoch
    iteration = 0
    pool: List[CheckpointRecord] = []

    for epoch in range(1, cfg.epochs + 1):
        use_ece = cfg.ece_loss and calib.alpha > 0 and epoch > cfg.ece_warmup_epochs
        seg_losses: List[float] = []
        ece_losses: List[float] = []
        for batch in make_batches(len(train), cfg.batch_size, shuffle_rng):
            x, y = load_batch(train, batch, augment_rng, flip_probability)
            optimizer.lr = poly_lr(cfg.lr, iteration, max_iterations, cfg.poly_power)
            with GradientTape() as tape:
                logits, _ = model(Tensor(x))
                l_seg = seg_loss(logits, y)
                loss = l_seg
                if use_ece:
                    l_ece = diff_ece_loss(logits, y, calib.bins, calib.temperature)
                    loss = F.add(l_seg, F.mul(l_ece, calib.alpha))
                    ece_losses.append(l_ece.item())
            seg_losses.append(l_seg.item())
            check_finite(
                "source", epoch, iteration, l_seg=l_seg.item(), l_ece_diff=ece_losses[-1] if use_ece else 0.0
            )
            tape.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            iteration += 1

        evaluation = evaluate_model(model, val, calib.bins)
        per_image = evaluation.per_image_ece
        record = CheckpointRecord(
            stage=Stage.SOURCE.value,
            epoch=epoch,
            state=model.state_dict(),
            ece_mean=float(per_image.mean()),
            ece_max=float(per_image.max()),
            ece_min=float(per_image.min()),
            l_seg=float(np.mean(seg_losses)),
            l_ece_diff=float(np.mean(ece_losses)) if ece_losses else 0.0,
            source_miou=evaluation.iou.miou,
        )
        if checkpoint_dir is not None:
            record.path = save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt",
                model,
                None,
                CheckpointMeta(stage=record.stage, epoch=epoch, metrics=record.metrics()),
            )
        pool.append(record)
        if log is not None:
            log.append(epoch=epoch, lr=optimizer.lr, **record.metrics())
        logger.info(
            f"source epoch {epoch}/{cfg.epochs}: L_seg={record.l_seg:.4f} L_ece={record.l_ece_diff:.4f} "
            f"val ECE mean/max/min={record.ece_mean:.4f}/{record.ece_max:.4f}/{record.ece_min:.4f} "
            f"val mIoU={record.source_miou:.4f}"
        )
    return pool


def select_source_checkpoint(
    pool: List[CheckpointRecord], criterion: SelectionCriterion = "ece"
) -> CheckpointRecord:
    """
    Pick θ* from the pool; ties go to the earliest epoch.

    ece:          argmin of mean + max + min per-image validation ECE
    source_miou:  argmax of source validation mIoU
    target_miou:  argmax of labeled target mIoU, an oracle upper bound that
                  needs target_miou filled on every record

    Raises:
        EmptyInputError: empty pool
        RangeError: unknown criterion, or target_miou missing from a record
    """
    if not pool:
        raise EmptyInputError("checkpoint pool is empty")
    if criterion == "ece":
        chosen = min(pool, key=lambda r: (r.ece_score, r.epoch))
    elif criterion == "source_miou":
        chosen = min(pool, key=lambda r: (-r.source_miou, r.epoch))
    elif criterion == "target_miou":
        missing = [r.epoch for r in pool if r.target_miou is None]
        if missing:
            raise RangeError(f"target_miou criterion needs target mIoU for epochs {missing}")
        chosen = min(pool, key=lambda r: (-(r.target_miou or 0.0), r.epoch))
    else:
        raise RangeError(f"unknown selection criterion: {criterion}")
    logger.info(f"selected source epoch {chosen.epoch} by {criterion}")
    return chosen


@dataclass
class ValueNetResult:
    best_epoch: int
    best_val_loss: float
    val_ece_variance: float
    history: List[Dict[str, float]] = field(default_factory=list)


def _features_and_ece(model: SegModel, dataset: SegDataset, bins: int) -> tuple[np.ndarray, np.ndarray]:
    parts = inference_pass(
        model,
        dataset,
        lambda idx, logits, feature, y: (feature, ece_per_image(logits, y, bins)),
    )
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _match_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = F.sub(pred, target.astype(pred.data.dtype))
    return F.mean(F.mul(diff, diff))


def _eval_match(valuenet: ValueNet, features: np.ndarray, target: np.ndarray) -> float:
    preds = []
    with no_grad(), evaluating(valuenet):
        for idx in chunks(len(features), EVAL_BATCH):
            preds.append(valuenet(Tensor(features[idx])).data)
    pred = np.concatenate(preds).astype(np.float64)
    return float(np.mean((pred - target) ** 2))


def train_value_net(
    train: SegDataset,
    val: SegDataset,
    model: SegModel,
    valuenet: ValueNet,
    cfg: ValueNetConfig,
    calib: CalibConfig,
    streams: RngStreams,
    metrics_path: Optional[Path] = None,
) -> ValueNetResult:
    """
    Regress per-image ground-truth ECE of the frozen θ* from tapped features.

    Minimizes L_match = mean (ECE_i − ECÊ_i)^2 by SGD and keeps the epoch with the
    smallest validation L_match; stops after `patience` epochs without improvement.

    Raises:
        StageMaskError: masks are not those of stage "valuenet" (θ* must be frozen)
    """
    require_stage(model, valuenet, Stage.VALUENET)
    train_feat, train_ece = _features_and_ece(model, train, calib.bins)
    val_feat, val_ece = _features_and_ece(model, val, calib.bins)
    val_variance = float(np.var(val_ece))
    logger.info(
        f"value net targets: train ECE mean={train_ece.mean():.4f}, val ECE mean={val_ece.mean():.4f} "
        f"var={val_variance:.6f}"
    )

    # start from the best constant predictor
    mean_ece = float(np.clip(train_ece.mean(), 1e-3, 1 - 1e-3))
    valuenet.fc_bias.data[...] = np.log(mean_ece / (1.0 - mean_ece))

    optimizer = SGD(valuenet.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = streams.fresh("shuffle", 1)
    log = MetricsLog(metrics_path, VALUENET_COLUMNS) if metrics_path else None
    iters_per_epoch = len(make_batches(len(train_feat), cfg.batch_size))
    max_iterations = cfg.epochs * iters_per_epoch
    iteration = 0

    best_loss = _eval_match(valuenet, val_feat, val_ece)
    best_state = valuenet.state_dict()
    best_epoch = 0
    result = ValueNetResult(best_epoch=0, best_val_loss=best_loss, val_ece_variance=val_variance)
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in make_batches(len(train_feat), cfg.batch_size, shuffle_rng):
            optimizer.lr = poly_lr(cfg.lr, iteration, max_iterations, cfg.poly_power)
            with GradientTape() as tape:
                loss = _match_loss(valuenet(Tensor(train_feat[batch])), train_ece[batch])
            check_finite("valuenet", epoch, iteration, l_match=loss.item())
            losses.append(loss.item())
            tape.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            iteration += 1

        val_loss = _eval_match(valuenet, val_feat, val_ece)
        row = {
            "epoch": epoch,
            "lr": optimizer.lr,
            "train_l_match": float(np.mean(losses)),
            "val_l_match": val_loss,
            "val_ece_variance": val_variance,
        }
        result.history.append(row)
        if log is not None:
            log.append(**row)
        logger.info(f"value net epoch {epoch}/{cfg.epochs}: train L_match={row['train_l_match']:.6f} val L_match={val_loss:.6f}")

        if val_loss < best_loss:
            best_loss, best_state, best_epoch, stale = val_loss, valuenet.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"value net: no val improvement for {stale} epochs, stopping")
                break

    valuenet.load_state_dict(best_state)
    result.best_epoch = best_epoch
    result.best_val_loss = best_loss
    logger.info(f"value net: best epoch {best_epoch}, val L_match={best_loss:.6f} (constant baseline {val_variance:.6f})")
    return result
