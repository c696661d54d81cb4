"""Per-pixel exceedance test of the calibrated upper confidence window, and the plain baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationModel, quantile
from .model import mc_predict


@dataclass(frozen=True)
class DuetConfig:
    threshold: float
    calibration: CalibrationModel | None
    confidence: float = 90.0
    n_samples: int = 30

    def __post_init__(self):
        if not 0.0 < self.confidence < 100.0:
            raise ValueError("confidence must lie in (0, 100)")
        if self.n_samples < 2:
            raise ValueError("DUET needs at least two MC samples")

    @property
    def upper_level(self) -> float:
        """One-tail level as a fraction: c + (100 - c) / 2, e.g. 0.95 for c = 90."""
        return (self.confidence + (100.0 - self.confidence) / 2.0) / 100.0

    @property
    def lower_level(self) -> float:
        return (100.0 - self.confidence) / 2.0 / 100.0


@dataclass(frozen=True)
class LocalizationResult:
    mask: np.ndarray
    upper_windows: np.ndarray
    mean_map: np.ndarray
    lower_windows: np.ndarray


def duet_from_samples(samples, cfg: DuetConfig) -> LocalizationResult:
    """Decide from MC draws stacked on axis 0; the trailing axes are pixels."""
    if cfg.calibration is None:
        raise ValueError("DUET needs a calibration map; pass CalibrationModel.identity() to skip calibration")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("DUET needs at least two MC samples")
    g = cfg.calibration
    upper = quantile(samples, g.inverse(cfg.upper_level))
    lower = quantile(samples, g.inverse(cfg.lower_level))
    # window <= T is non-adversarial, so strictly above T is flagged
    mask = (upper > cfg.threshold).astype(np.float64)
    return LocalizationResult(mask, upper, samples.mean(axis=0), lower)


def duet_localize(model, image, cfg: DuetConfig, seed: int = 0) -> LocalizationResult:
    if cfg.calibration is None:
        raise ValueError("DUET needs a calibration map; pass CalibrationModel.identity() to skip calibration")
    return duet_from_samples(mc_predict(model, image, cfg.n_samples, seed), cfg)


def duet_localize_batch(model, images, cfg: DuetConfig, seed: int = 0, batch_size: int = 25) -> list[LocalizationResult]:
    out = []
    for start in range(0, len(images), batch_size):
        samples = mc_predict(model, images[start : start + batch_size], cfg.n_samples, seed)
        for b in range(samples.shape[1]):
            out.append(duet_from_samples(samples[:, b], cfg))
    return out


def point_from_samples(samples, threshold: float) -> np.ndarray:
    return (np.asarray(samples, dtype=np.float64).mean(axis=0) >= threshold).astype(np.float64)


def point_localize(model, image, threshold: float, n_samples: int = 30, seed: int = 0) -> np.ndarray:
    """Baseline: flag pixels whose MC-mean probability reaches ``threshold``."""
    return point_from_samples(mc_predict(model, image, n_samples, seed), threshold)


def point_localize_batch(model, images, threshold: float, n_samples: int = 30, seed: int = 0,
                         batch_size: int = 25) -> np.ndarray:
    return np.concatenate([
        point_from_samples(mc_predict(model, images[s : s + batch_size], n_samples, seed), threshold)
        for s in range(0, len(images), batch_size)
    ])


def mean_maps(model, images, n_samples: int = 30, seed: int = 0, batch_size: int = 25) -> np.ndarray:
    if not model.is_bayesian:
        n_samples = 1
    return np.concatenate([
        mc_predict(model, images[s : s + batch_size], n_samples, seed).mean(axis=0)
        for s in range(0, len(images), batch_size)
    ])
