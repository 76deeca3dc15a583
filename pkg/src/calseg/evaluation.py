"""
Segmentation quality and calibration of a model on a dataset split
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .calibration import ReliabilityDiagram, compute_ece, confidence_and_prediction
from .datagen import IGNORE_LABEL, SegDataset
from .model import SegModel
from .training import EVAL_BATCH, inference_pass

logger = logging.getLogger(__name__)


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN for classes absent from both prediction and labels
    miou: float


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """C×C counts, rows = ground truth, columns = prediction; 255 pixels skipped."""
    valid = labels != IGNORE_LABEL
    gt = labels[valid].astype(np.int64)
    pr = pred[valid].astype(np.int64)
    return np.bincount(gt * num_classes + pr, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf_mat: np.ndarray) -> IoUResult:
    tp = np.diag(conf_mat).astype(np.float64)
    fp = conf_mat.sum(axis=0) - tp
    fn = conf_mat.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(conf_mat.shape[0], np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    miou = float(np.nanmean(per_class)) if present.any() else 0.0
    return IoUResult(per_class=per_class, miou=miou)


def miou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> IoUResult:
    """IoU_c = TP/(TP+FP+FN); classes absent from both sides are left out of the mean."""
    return iou_from_confusion(confusion_matrix(pred, labels, num_classes))


@dataclass
class SplitEvaluation:
    iou: IoUResult
    ece: float
    diagram: ReliabilityDiagram
    per_image_ece: np.ndarray


def evaluate_model(
    model: SegModel,
    dataset: SegDataset,
    bins: int = 10,
    batch_size: int = EVAL_BATCH,
) -> SplitEvaluation:
    """mIoU, pooled-pixel ECE and per-image ECE of model on dataset (eval mode)."""
    c = dataset.num_classes

    def per_chunk(idx: np.ndarray, logits: np.ndarray, feature: np.ndarray, y: np.ndarray) -> tuple:
        conf, pred = confidence_and_prediction(logits)
        valid = y != IGNORE_LABEL
        image_ece = [
            compute_ece(conf[i][valid[i]], (pred[i] == y[i])[valid[i]], bins)[0] if valid[i].any() else np.nan
            for i in range(len(idx))
        ]
        return confusion_matrix(pred, y, c), conf[valid], (pred == y)[valid], image_ece

    parts = inference_pass(model, dataset, per_chunk, batch_size)
    conf_mat = sum(p[0] for p in parts)
    ece, diagram = compute_ece(np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]), bins)
    per_image = np.concatenate([np.asarray(p[3], dtype=np.float64) for p in parts])
    result = SplitEvaluation(iou=iou_from_confusion(conf_mat), ece=ece, diagram=diagram, per_image_ece=per_image)
    logger.debug(f"evaluate {dataset.name}: mIoU={result.iou.miou:.4f} ECE={ece:.4f}")
    return result
