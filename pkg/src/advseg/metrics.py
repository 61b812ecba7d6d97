"""Segmentation metrics and the class-distribution shift report."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import ClassStats


def confusion(pred, true, num_classes: int) -> np.ndarray:
    """(c, c) integer confusion matrix, rows = ground truth, cols = prediction."""
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    t = np.asarray(true, dtype=np.int64).reshape(-1)
    if p.shape[0] != t.shape[0]:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs "
                         f"{t.shape[0]} ground-truth labels")
    cm = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU = TP / (TP + FP + FN) per class; NaN where a class is absent
    from both prediction and ground truth."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    out = np.full(cm.shape[0], np.nan)
    seen = denom > 0
    out[seen] = tp[seen] / denom[seen]
    return out


def miou(cm: np.ndarray, ignore_classes: tuple[int, ...] = ()) -> float:
    """Mean IoU over classes present in prediction or truth; NaN if none.

    ``ignore_classes`` drops ids (e.g. an unlabeled class) from the mean.
    """
    ious = iou_per_class(cm)
    if ignore_classes:
        keep = np.ones(ious.shape[0], dtype=bool)
        keep[list(ignore_classes)] = False
        ious = ious[keep]
    present = ious[~np.isnan(ious)]
    if present.size == 0:
        return float("nan")
    return float(present.mean())


def evaluate(pred, true, num_classes: int) -> tuple[np.ndarray, float]:
    cm = confusion(pred, true, num_classes)
    return iou_per_class(cm), miou(cm)


@dataclass
class ShiftRow:
    class_id: int
    freq_before: float
    freq_after: float
    abs_delta: float
    rel_delta: float


def distribution_shift_report(before: ClassStats, after: ClassStats) -> list[ShiftRow]:
    """Per-class frequency change, sorted by descending pre-attack frequency.

    ``rel_delta`` is the absolute delta over the pre-attack frequency
    (0 when the class was absent before).
    """
    if before.num_classes != after.num_classes:
        raise ValueError("class counts differ between the two tallies")
    rows = []
    for y in range(before.num_classes):
        fb = float(before.frequencies[y])
        fa = float(after.frequencies[y])
        rel = (fa - fb) / fb if fb > 0 else 0.0
        rows.append(ShiftRow(class_id=y, freq_before=fb, freq_after=fa,
                             abs_delta=fa - fb, rel_delta=rel))
    rows.sort(key=lambda r: (-r.freq_before, r.class_id))
    return rows


def write_shift_csv(rows: list[ShiftRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "freq_before", "freq_after", "abs_delta", "rel_delta"])
        for r in rows:
            w.writerow([r.class_id, repr(r.freq_before), repr(r.freq_after),
                        repr(r.abs_delta), repr(r.rel_delta)])


def read_shift_csv(path) -> list[ShiftRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ShiftRow(class_id=int(rec["class_id"]),
                                 freq_before=float(rec["freq_before"]),
                                 freq_after=float(rec["freq_after"]),
                                 abs_delta=float(rec["abs_delta"]),
                                 rel_delta=float(rec["rel_delta"])))
    return rows
