"""Classification and segmentation metrics.

Overall accuracy (OA) is the fraction of correctly predicted samples; mean
class accuracy (mcA) averages per-class recall; part-category mIoU
aggregates true/false positives and false negatives per part over the whole
evaluation set before forming each IoU, then averages over the part
categories that occur in either prediction or ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(preds, truth, n_classes: int) -> np.ndarray:
    """(n_classes, n_classes) count matrix, rows = truth, cols = prediction."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} preds vs {t.shape} truth")
    if p.size == 0:
        raise ValueError("no samples")
    for name, arr in (("pred", p), ("truth", t)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(
                f"{name} label outside [0, {n_classes}): min {arr.min()}, max {arr.max()}"
            )
    conf = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return conf.reshape(n_classes, n_classes)


def overall_accuracy(conf: np.ndarray) -> float:
    return float(np.trace(conf) / conf.sum())


def per_class_recall(conf: np.ndarray) -> np.ndarray:
    """Recall per class; NaN where the class has no ground-truth samples."""
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore"):
        return np.where(support > 0, np.diag(conf) / support, np.nan)


def mean_class_accuracy(conf: np.ndarray) -> float:
    """Mean recall over the classes that occur in the ground truth."""
    recalls = per_class_recall(conf)
    present = ~np.isnan(recalls)
    if not present.any():
        raise ValueError("no class has ground-truth samples")
    return float(recalls[present].mean())


def miou(preds, truth, n_parts: int) -> tuple[float, np.ndarray]:
    """Part-category mIoU over an evaluation set.

    Accepts flat arrays or per-cloud lists; counts are aggregated over the
    whole set before each part's IoU = TP / (TP + FP + FN) is formed. Parts
    absent from both prediction and truth are excluded from the mean.

    Returns:
        (mIoU, per-part IoU array with NaN for excluded parts).
    """
    if isinstance(preds, (list, tuple)):
        preds = np.concatenate([np.asarray(a).ravel() for a in preds])
    if isinstance(truth, (list, tuple)):
        truth = np.concatenate([np.asarray(a).ravel() for a in truth])
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} preds vs {t.shape} truth")
    if p.size == 0:
        raise ValueError("no points")
    if p.min() < 0 or p.max() >= n_parts or t.min() < 0 or t.max() >= n_parts:
        raise ValueError(f"part label outside [0, {n_parts})")
    conf = confusion_matrix(p, t, n_parts)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    if not present.any():
        raise ValueError("no part occurs in prediction or truth")
    return float(iou[present].mean()), iou


@dataclass
class MetricsReport:
    """Evaluation summary for one run.

    ``part_category_miou``/``per_part_iou`` are None for classification.
    """

    overall_accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray
    recalls: np.ndarray
    part_category_miou: float | None = None
    per_part_iou: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds, truth, n_classes: int) -> "MetricsReport":
        conf = confusion_matrix(preds, truth, n_classes)
        return cls(
            overall_accuracy=overall_accuracy(conf),
            mean_class_accuracy=mean_class_accuracy(conf),
            confusion=conf,
            recalls=per_class_recall(conf),
        )

    @classmethod
    def from_part_predictions(cls, preds, truth, n_parts: int) -> "MetricsReport":
        m, per_part = miou(preds, truth, n_parts)
        flat_p = preds if not isinstance(preds, (list, tuple)) else np.concatenate(
            [np.asarray(a).ravel() for a in preds]
        )
        flat_t = truth if not isinstance(truth, (list, tuple)) else np.concatenate(
            [np.asarray(a).ravel() for a in truth]
        )
        conf = confusion_matrix(flat_p, flat_t, n_parts)
        return cls(
            overall_accuracy=overall_accuracy(conf),
            mean_class_accuracy=mean_class_accuracy(conf),
            confusion=conf,
            recalls=per_class_recall(conf),
            part_category_miou=m,
            per_part_iou=per_part,
        )

    def to_dict(self) -> dict:
        out = {
            "overall_accuracy": self.overall_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "confusion": self.confusion.tolist(),
            "recalls": [None if np.isnan(r) else float(r) for r in self.recalls],
        }
        if self.part_category_miou is not None:
            out["part_category_miou"] = self.part_category_miou
            out["per_part_iou"] = [
                None if np.isnan(v) else float(v) for v in self.per_part_iou
            ]
        out.update(self.extra)
        return out
