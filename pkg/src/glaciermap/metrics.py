"""Segmentation evaluation: confusion counts, IoU/precision/recall, set-level
aggregation, and debris-percentage stratification.

Set-level means counts are summed over every patch before ratios are taken,
not averaged per patch; small patches with few positives then cannot
dominate the score.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

DEFAULT_DEBRIS_THRESHOLDS = (0.0, 0.01, 0.02, 0.05, 0.10)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred_binary: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Exact per-plane counts; both inputs must be binary and same shape."""
    pred_binary = np.asarray(pred_binary)
    truth = np.asarray(truth)
    if pred_binary.shape != truth.shape:
        raise ShapeError(f"pred {pred_binary.shape} vs truth {truth.shape}")
    p = pred_binary.astype(bool)
    t = truth.astype(bool)
    return ConfusionCounts(
        tp=int(np.logical_and(p, t).sum()),
        fp=int(np.logical_and(p, ~t).sum()),
        fn=int(np.logical_and(~p, t).sum()),
        tn=int(np.logical_and(~p, ~t).sum()),
    )


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom > 0 else 0.0


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom > 0 else 0.0


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom > 0 else 0.0


def degenerate_flags(c: ConfusionCounts) -> dict[str, bool]:
    """True where the corresponding ratio was 0/0 (reported as 0)."""
    return {
        "iou": c.tp + c.fp + c.fn == 0,
        "precision": c.tp + c.fp == 0,
        "recall": c.tp + c.fn == 0,
    }


def metrics_row(c: ConfusionCounts) -> dict:
    return {
        "iou": iou(c),
        "precision": precision(c),
        "recall": recall(c),
        "tp": c.tp,
        "fp": c.fp,
        "fn": c.fn,
        "tn": c.tn,
        "degenerate": degenerate_flags(c),
    }


def evaluate_set(preds: list[np.ndarray], truths: list[np.ndarray]) -> dict:
    """Set-level metrics: counts summed over all patches, then one ratio."""
    if len(preds) != len(truths):
        raise ValidationError(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValidationError("cannot evaluate an empty set")
    total = ConfusionCounts()
    for p, t in zip(preds, truths):
        total = total + confusion_counts(p, t)
    row = metrics_row(total)
    row["patch_count"] = len(preds)
    return row


@dataclass
class EvalReport:
    """Per-class and union metrics plus optional debris stratification."""

    per_class: dict[str, dict] = field(default_factory=dict)
    patch_count: int = 0
    stratification: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class": self.per_class,
                "patch_count": self.patch_count,
                "stratification": self.stratification,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["class", "iou", "precision", "recall", "tp", "fp", "fn", "tn"])
        for name, row in self.per_class.items():
            writer.writerow(
                [name, row["iou"], row["precision"], row["recall"],
                 row["tp"], row["fp"], row["fn"], row["tn"]]
            )
        return buf.getvalue()

    @classmethod
    def from_planes(
        cls,
        pred_planes: dict[str, list[np.ndarray]],
        truth_planes: dict[str, list[np.ndarray]],
    ) -> "EvalReport":
        per_class = {}
        count = 0
        for name, preds in pred_planes.items():
            row = evaluate_set(preds, truth_planes[name])
            count = row.pop("patch_count")
            per_class[name] = row
        return cls(per_class=per_class, patch_count=count)


def stratification_csv(rows: list[dict]) -> str:
    """Mirror of the debris-effect table: % of Debris | % of Data | per-model IoU | IoU Difference."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    models = sorted({m for r in rows for m in r["iou"]})
    writer.writerow(
        ["pct_debris_gt", "pct_data"] + [f"iou_{m}" for m in models] + ["iou_difference"]
    )
    for r in rows:
        writer.writerow(
            [r["threshold"], r["data_share"]]
            + [r["iou"].get(m) for m in models]
            + [r.get("iou_difference")]
        )
    return buf.getvalue()


def stratify_by_debris(
    model_preds: dict[str, list[np.ndarray]] | list[np.ndarray],
    truths: list[np.ndarray],
    debris_fractions: list[float],
    thresholds: tuple[float, ...] = DEFAULT_DEBRIS_THRESHOLDS,
) -> list[dict]:
    """Set-level IoU restricted to patches with debris fraction > threshold.

    ``model_preds`` maps a model label to its per-patch binary planes (a bare
    list is treated as one unnamed model). With exactly two models the
    iou_difference column is second minus first, in percentage points.
    Empty strata report data_share 0 and null IoU.
    """
    if isinstance(model_preds, list):
        model_preds = {"model": model_preds}
    order = list(model_preds)
    n = len(truths)
    for label, preds in model_preds.items():
        if len(preds) != n:
            raise ValidationError(f"model {label!r}: {len(preds)} preds vs {n} truths")
    if len(debris_fractions) != n:
        raise ValidationError("debris_fractions length mismatch")

    rows = []
    for t in thresholds:
        idx = [i for i, f in enumerate(debris_fractions) if f > t]
        row: dict = {
            "threshold": t,
            "data_share": len(idx) / n if n else 0.0,
            "n_patches": len(idx),
            "iou": {},
        }
        for label in order:
            if not idx:
                row["iou"][label] = None
                continue
            preds = model_preds[label]
            row["iou"][label] = evaluate_set(
                [preds[i] for i in idx], [truths[i] for i in idx]
            )["iou"]
        if len(order) == 2 and idx:
            a, b = (row["iou"][m] for m in order)
            row["iou_difference"] = 100.0 * (b - a)
        else:
            row["iou_difference"] = None
        rows.append(row)
    return rows
