"""Precision-recall sweep and F1-maximizing threshold selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f1: float
    brier: float = float("nan")


def default_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def pr_curve(probs, labels, grid=None) -> list[PRPoint]:
    """One point per threshold t, predicting positive where prob >= t.

    Precision is 1 when nothing is predicted positive.  ``brier`` is the
    squared error of the hard decisions at t, i.e. the error rate.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    truth = labels.astype(bool)
    positives = int(truth.sum())
    if positives == 0:
        raise ValueError("precision/recall need at least one positive label")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    # counting through sorted probabilities: #(prob >= t) and #(positive with prob >= t)
    order = np.argsort(probs, kind="stable")
    sp = probs[order]
    pos_cum = np.concatenate([[0], np.cumsum(truth[order])])
    out = []
    n = len(probs)
    for t in grid:
        k = np.searchsorted(sp, t, side="left")
        pred = n - k
        tp = positives - int(pos_cum[k])
        fp = pred - tp
        fn = positives - tp
        precision = tp / pred if pred else 1.0
        recall = tp / positives
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(PRPoint(float(t), float(precision), float(recall), float(f1), float((fp + fn) / n)))
    return out


def select_threshold(curve: list[PRPoint]) -> float:
    """Threshold of the best-F1 point; ties go to the larger threshold."""
    if not curve:
        raise ValueError("empty precision-recall curve")
    best = max(curve, key=lambda p: (p.f1, p.threshold))
    return best.threshold


def brier_score(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    return float(np.mean((probs - labels) ** 2))


def curve_to_csv(curve: list[PRPoint]) -> str:
    rows = ["threshold,precision,recall,f1,brier"]
    rows += [f"{p.threshold!r},{p.precision!r},{p.recall!r},{p.f1!r},{p.brier!r}" for p in curve]
    return "\n".join(rows) + "\n"
