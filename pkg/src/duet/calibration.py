"""Quantile-level recalibration of Monte-Carlo output distributions.

For every calibration pixel we record where a reference probability falls
inside that pixel's own MC sample distribution (its empirical level), then
where that level sits among the levels of all pixels (their empirical CDF).
An isotonic map from the first to the second is inverted at inference time
to pick which sample quantile to report.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class CalibrationPair:
    x: float
    y: float


@dataclass(frozen=True)
class CalibrationModel:
    """Nondecreasing piecewise-linear map on [0, 1], constant beyond its end breakpoints."""

    breakpoints: np.ndarray
    fitted: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        f = np.asarray(self.fitted, dtype=np.float64)
        if bp.ndim != 1 or bp.shape != f.shape or len(bp) == 0:
            raise ValueError("breakpoints and fitted values must be equal-length 1-d arrays")
        if np.any(np.diff(bp) < 0):
            raise ValueError("breakpoints must be sorted")
        if np.any(np.diff(f) < 0):
            raise ValueError("calibration map must be nondecreasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "fitted", f)

    @classmethod
    def identity(cls) -> "CalibrationModel":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def __call__(self, p):
        return np.interp(p, self.breakpoints, self.fitted)

    def inverse(self, target):
        """Smallest level p in [0, 1] with map(p) >= target (1 if never reached)."""
        t = np.asarray(target, dtype=np.float64)
        bp, f = self.breakpoints, self.fitted
        i = np.searchsorted(f, t, side="left")
        lo = np.clip(i - 1, 0, len(f) - 1)
        hi = np.clip(i, 0, len(f) - 1)
        span = f[hi] - f[lo]
        frac = np.divide(t - f[lo], span, out=np.ones_like(t), where=span > 0)
        p = bp[lo] + frac * (bp[hi] - bp[lo])
        p = np.where(i == 0, 0.0, p)
        p = np.where(i >= len(f), 1.0, p)
        p = np.clip(p, 0.0, 1.0)
        return float(p) if p.ndim == 0 else p

    def to_csv(self) -> str:
        rows = ["level,fitted"] + [f"{float(x)!r},{float(y)!r}" for x, y in zip(self.breakpoints, self.fitted)]
        return "\n".join(rows) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationModel":
        lines = Path(path).read_text().strip().splitlines()
        if not lines or lines[0].strip() != "level,fitted":
            raise ValueError(f"{path}: expected a 'level,fitted' header")
        data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
        if data.size == 0:
            raise ValueError(f"{path}: no calibration rows")
        return cls(data[:, 0], data[:, 1])


def pava(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted pool-adjacent-violators: nondecreasing least-squares fit to ``y`` in order."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            wt = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / wt
            weights[-1] = wt
            sizes[-1] += s2
    return np.repeat(means, sizes)


def isotonic_fit(x, y, weights=None) -> CalibrationModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be matching 1-d arrays")
    if len(x) < 2:
        raise ValueError("isotonic calibration needs at least two pairs")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    # tied x values are pooled first so each breakpoint carries one value
    ux, start = np.unique(xs, return_index=True)
    wsum = np.add.reduceat(ws, start)
    ymean = np.add.reduceat(ys * ws, start) / wsum
    return CalibrationModel(ux, pava(ymean, wsum))


def fit_isotonic(pairs: Sequence[CalibrationPair] | np.ndarray) -> CalibrationModel:
    if len(pairs) and isinstance(pairs[0], CalibrationPair):
        arr = np.array([(p.x, p.y) for p in pairs], dtype=np.float64)
    else:
        arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise ValueError("isotonic calibration needs at least two pairs")
    return isotonic_fit(arr[:, 0], arr[:, 1])


def empirical_level(mc_samples, reference):
    """Mid-rank of ``reference`` among the MC samples: (#below + #equal / 2) / N.

    ``mc_samples`` has the draws on axis 0; ``reference`` broadcasts against
    the remaining axes, so whole probability maps can be processed at once.
    """
    s = np.asarray(mc_samples, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("empirical level needs at least two samples")
    r = np.asarray(reference, dtype=np.float64)
    below = np.sum(s < r, axis=0)
    equal = np.sum(s == r, axis=0)
    level = (below + 0.5 * equal) / s.shape[0]
    return float(level) if np.ndim(level) == 0 else level


def calibration_pairs(levels) -> np.ndarray:
    """(x, y) pairs: each level and the fraction of all levels <= it."""
    x = np.asarray(levels, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ValueError("no calibration levels")
    y = np.searchsorted(np.sort(x), x, side="right") / len(x)
    return np.column_stack([x, y])


def quantile(mc_samples, level):
    """Linear-interpolation sample quantile along axis 0."""
    return np.quantile(np.asarray(mc_samples, dtype=np.float64), level, axis=0, method="linear")


def calibrated_quantile(model: CalibrationModel, mc_samples, target_level: float):
    if not 0.0 < target_level < 1.0:
        raise ValueError("target level must lie strictly between 0 and 1")
    return quantile(mc_samples, model.inverse(target_level))


def reference_probabilities(nonbayes_model, images, masks, threshold: float, batch_size: int = 32):
    """Non-Bayes probabilities and a mask of the pixels it classifies correctly at ``threshold``."""
    if nonbayes_model.is_bayesian:
        raise ValueError("reference probabilities come from a model without Bayesian layers")
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    ref = np.concatenate([nonbayes_model.predict_proba(images[i : i + batch_size])
                          for i in range(0, len(images), batch_size)])
    included = (ref >= threshold) == (masks > 0.5)
    if not included.any():
        raise ValueError("no correctly classified pixels: calibration is impossible")
    return ref, included


def fit_calibration(mc_samples, reference, included) -> CalibrationModel:
    """Isotonic map from per-pixel levels of ``reference`` within ``mc_samples`` (draws on axis 0)."""
    levels = empirical_level(mc_samples, reference)
    levels = np.asarray(levels)[np.asarray(included, dtype=bool)]
    pairs = calibration_pairs(levels)
    return isotonic_fit(pairs[:, 0], pairs[:, 1])


def coverage(mc_samples, reference, lower_level: float, upper_level: float,
             model: CalibrationModel | None = None) -> float:
    """Fraction of references inside the (optionally calibrated) central interval."""
    model = model or CalibrationModel.identity()
    lo = quantile(mc_samples, model.inverse(lower_level))
    hi = quantile(mc_samples, model.inverse(upper_level))
    r = np.asarray(reference)
    return float(np.mean((r >= lo) & (r <= hi)))
