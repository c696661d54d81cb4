"""Segmentation metrics: two-class mIoU, the clean-image background IoU, corpus aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be a binary mask")
    return a.astype(bool)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    # a class absent from both masks counts as perfectly segmented
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def miou(pred, truth) -> float:
    """Mean of the adversarial-class and background-class IoU."""
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    return (_iou(p, t) + _iou(~p, ~t)) / 2.0


def miou_clean(pred, truth) -> float:
    """Background IoU for an image without a patch: TN / (TN + FP)."""
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if t.any():
        raise ValueError("miou_clean expects an all-background truth mask")
    return _iou(~p, ~t)


@dataclass(frozen=True)
class MetricReport:
    per_image: list[tuple[int, float]]
    mean: float
    std: float


def aggregate(per_image) -> MetricReport:
    """Mean and population standard deviation over ``(id, score)`` pairs."""
    rows = [(int(i), float(s)) for i, s in per_image]
    if not rows:
        raise ValueError("cannot aggregate an empty corpus")
    scores = np.array([s for _, s in rows])
    return MetricReport(rows, float(np.mean(scores)), float(np.std(scores)))


def evaluate_masks(ids, preds, truths) -> tuple[str, MetricReport]:
    """mIoU per image, or the clean variant when every truth mask is empty."""
    truths = np.asarray(truths)
    clean = not truths.any()
    fn = miou_clean if clean else miou
    report = aggregate([(i, fn(p, t)) for i, p, t in zip(ids, preds, truths)])
    return ("miou_clean" if clean else "miou"), report


def report_to_csv(metric: str, report: MetricReport) -> str:
    rows = ["id,metric,value"] + [f"{i},{metric},{v!r}" for i, v in report.per_image]
    rows += [f"mean,{metric},{report.mean!r}", f"std,{metric},{report.std!r}"]
    return "\n".join(rows) + "\n"
