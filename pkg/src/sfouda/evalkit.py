"""Segmentation metrics, feature-separation index and pseudo-label accuracy."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .stream import CLASS_NAMES, NUM_CLASSES


class AllEmpty(ValueError):
    pass


class SingleClass(ValueError):
    pass


class CoincidentCentroids(RuntimeWarning):
    pass


class EmptyPseudoLabels(ValueError):
    pass


def confusion_matrix(gt, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns predictions, for class ids 1..C; gt == 0 is skipped."""
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    keep = gt > 0
    g, p = gt[keep] - 1, pred[keep] - 1
    if len(p) and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError("predictions must be class ids in 1..C")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def iou(cm: np.ndarray):
    """Per-class IoU in percent (NaN where undefined) and their mean over defined classes."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() == 0:
        raise AllEmpty("confusion matrix has no counts")
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, 100.0 * tp / denom, np.nan)
    return per_class, float(np.nanmean(per_class))


def improvement_over_source(adapted: float, frozen: float) -> float:
    return adapted - frozen


def db_index(features, labels) -> float:
    """Davies-Bouldin index with mean (not RMS) distance-to-centroid as scatter."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClass("need at least two classes")
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    scat = np.array([np.linalg.norm(X[y == c] - cents[i], axis=1).mean()
                     for i, c in enumerate(classes)])
    gaps = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
    k = len(classes)
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            if gaps[i, j] == 0.0:
                warnings.warn("coincident class centroids", CoincidentCentroids)
                return math.inf
            worst[i] = max(worst[i], (scat[i] + scat[j]) / gaps[i, j])
    return float(worst.mean())


def pseudo_label_accuracy(pseudo, gt_labels, top_k: Optional[int] = None) -> float:
    """Percent of pseudo-labels matching ground truth.

    With ``top_k`` set, only entries with propagation rank below ``top_k``
    count (seeds have rank 0, so ``top_k=1`` scores seeds alone).
    """
    correct, total = pseudo_label_counts(pseudo, gt_labels, top_k)
    if total == 0:
        raise EmptyPseudoLabels("no pseudo-labels to score")
    return 100.0 * correct / total


def pseudo_label_counts(pseudo, gt_labels, top_k: Optional[int] = None) -> tuple[int, int]:
    gt = np.asarray(gt_labels)
    keep = np.ones(len(pseudo.index), dtype=bool) if top_k is None else pseudo.rank < top_k
    idx, lab = pseudo.index[keep], pseudo.label[keep]
    scored = gt[idx] > 0
    return int((gt[idx][scored] == lab[scored]).sum()), int(scored.sum())


# --------------------------------------------------------------------------
# per-frame records


IOU_COLUMNS = [f"iou_{n}" for n in CLASS_NAMES[1:]]
LAMBDA_COLUMNS = [f"lambda_{n}" for n in CLASS_NAMES[1:]]
CSV_COLUMNS = (["frame_id", "miou", "source_miou", "improvement"] + IOU_COLUMNS
               + ["seeds", "propagated", "correspondences", "loss_dice", "loss_reg", "adapted"]
               + LAMBDA_COLUMNS)


@dataclass
class MetricRecord:
    frame_id: int
    per_class_iou: np.ndarray
    miou: float
    source_miou: float
    seeds: int = 0
    propagated: int = 0
    thresholds: np.ndarray = field(default_factory=lambda: np.full(NUM_CLASSES, np.nan))
    loss_dice: float = float("nan")
    loss_reg: float = float("nan")
    correspondences: int = 0
    adapted: bool = False
    wall_ms: float = 0.0

    @property
    def improvement(self) -> float:
        return improvement_over_source(self.miou, self.source_miou)

    def row(self) -> list:
        return ([self.frame_id, _fmt(self.miou), _fmt(self.source_miou), _fmt(self.improvement)]
                + [_fmt(v) for v in self.per_class_iou]
                + [self.seeds, self.propagated, self.correspondences,
                   _fmt(self.loss_dice), _fmt(self.loss_reg), int(self.adapted)]
                + [_fmt(v) for v in self.thresholds])


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return repr(v)


def write_metrics_csv(records: Sequence[MetricRecord], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records: Sequence[MetricRecord], config: Optional[dict] = None) -> dict:
    if not records:
        return {"frames": 0, "config": config or {}}
    per_class = np.vstack([r.per_class_iou for r in records])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        class_means = np.nanmean(per_class, axis=0)
    adapted = [r for r in records if r.adapted]
    return {
        "frames": len(records),
        "mean_miou": float(np.mean([r.miou for r in records])),
        "mean_source_miou": float(np.mean([r.source_miou for r in records])),
        "mean_improvement": float(np.mean([r.improvement for r in records])),
        "per_class_iou": {n: (None if np.isnan(v) else float(v))
                          for n, v in zip(CLASS_NAMES[1:], class_means)},
        "adapted_frames": len(adapted),
        "mean_seeds": float(np.mean([r.seeds for r in adapted])) if adapted else 0.0,
        "mean_propagated": float(np.mean([r.propagated for r in adapted])) if adapted else 0.0,
        "mean_correspondences": float(np.mean([r.correspondences for r in adapted])) if adapted else 0.0,
        "config": config or {},
    }


def write_summary(summary: dict, path):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
