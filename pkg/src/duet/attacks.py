"""Square-patch placement and patch-confined attacks (PGD, FGSM, localized patch).

Attacks take any victim exposing ``loss_and_input_grad(images, labels)``
returning per-image losses and d(sum of losses)/d(images); batches of
images (B, M, M, 3) are attacked together.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

MAX_PATCH_FRACTION = 0.02


class AttackKind(str, enum.Enum):
    PGD = "pgd"
    FGSM = "fgsm"
    LOCALIZED = "localized"


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    side: int

    def check(self, m: int) -> None:
        check_patch_side(m, self.side)
        if not (0 <= self.top and self.top + self.side <= m and 0 <= self.left and self.left + self.side <= m):
            raise ValueError(f"patch {self} does not fit in a {m}x{m} image")

    def mask(self, m: int) -> np.ndarray:
        out = np.zeros((m, m))
        out[self.top : self.top + self.side, self.left : self.left + self.side] = 1.0
        return out


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.PGD
    gamma: float = 0.3
    alpha: float = 0.05
    iters: int = 20
    random_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")

    @classmethod
    def pgd(cls, gamma=0.3, alpha=0.05, iters=20):
        return cls(AttackKind.PGD, gamma, alpha, iters, True)

    @classmethod
    def fgsm(cls, gamma=0.3, alpha=0.05, iters=20):
        return cls(AttackKind.FGSM, gamma, alpha, iters, False)

    @classmethod
    def localized(cls, alpha=0.05, iters=100):
        return cls(AttackKind.LOCALIZED, 1.0, alpha, iters, True)


def check_patch_side(m: int, side: int) -> None:
    if side < 1:
        raise ValueError("patch side must be positive")
    if side * side > MAX_PATCH_FRACTION * m * m:
        raise ValueError(
            f"patch of side {side} covers {side * side / (m * m):.2%} of a {m}x{m} image; "
            f"patches must stay within 2% of the image area"
        )


def max_patch_side(m: int) -> int:
    side = int(np.floor(np.sqrt(MAX_PATCH_FRACTION * m * m)))
    while side * side > MAX_PATCH_FRACTION * m * m:
        side -= 1
    return side


def place_patch(rng_seed, m: int, side: int) -> PatchSpec:
    check_patch_side(m, side)
    rng = np.random.default_rng(rng_seed)
    top, left = rng.integers(0, m - side + 1, size=2)
    return PatchSpec(int(top), int(left), side)


def _patch_masks(specs, m: int) -> np.ndarray:
    return np.stack([s.mask(m) for s in specs])[..., None]


def _as_batch(x0, labels, specs):
    single = np.ndim(x0) == 3
    x0 = np.asarray(x0, dtype=np.float64)
    if single:
        x0, labels, specs = x0[None], [labels], [specs]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if isinstance(specs, PatchSpec):
        specs = [specs] * len(x0)
    m = x0.shape[1]
    for s in specs:
        s.check(m)
    return single, x0, labels, list(specs)


def _project(x, x0, gamma: float) -> np.ndarray:
    """Clip to the gamma ball around ``x0`` and to [0, 1], exactly in floating point."""
    x = np.clip(x0 + np.clip(x - x0, -gamma, gamma), 0.0, 1.0)
    # x0 + zeta can round one ulp past the ball; step those entries back toward x0
    over = np.abs(x - x0) > gamma
    while np.any(over):
        x[over] = np.nextafter(x[over], x0[over])
        over = np.abs(x - x0) > gamma
    return x


def _signed_ascent(victim, x0, labels, specs, cfg: AttackConfig, seed) -> np.ndarray:
    region = _patch_masks(specs, x0.shape[1])
    x = x0.copy()
    if cfg.random_init and cfg.gamma > 0:
        rng = np.random.default_rng(seed)
        x = _project(x0 + rng.uniform(-cfg.gamma, cfg.gamma, size=x0.shape) * region, x0, cfg.gamma)
    for _ in range(cfg.iters):
        _, grad = victim.loss_and_input_grad(x, labels)
        x = x + cfg.alpha * np.sign(grad) * region
        x = _project(x, x0, cfg.gamma)
    # outside the patch the image is returned untouched, bit for bit
    return np.where(region > 0, x, x0)


def pgd_patch(victim, x0, y0, spec, cfg: AttackConfig | None = None, seed=0) -> np.ndarray:
    """l_inf PGD confined to the patch: random start, ascend, project, clamp."""
    cfg = cfg or AttackConfig.pgd()
    if cfg.kind is not AttackKind.PGD:
        raise ValueError(f"pgd_patch got a {cfg.kind.value} config")
    single, x0, labels, specs = _as_batch(x0, y0, spec)
    out = _signed_ascent(victim, x0, labels, specs, cfg, seed)
    return out[0] if single else out


def fgsm_patch(victim, x0, y0, spec, cfg: AttackConfig | None = None, seed=0) -> np.ndarray:
    """Iterated fast-gradient-sign attack: PGD without the random start."""
    cfg = cfg or AttackConfig.fgsm()
    if cfg.kind is not AttackKind.FGSM:
        raise ValueError(f"fgsm_patch got a {cfg.kind.value} config")
    single, x0, labels, specs = _as_batch(x0, y0, spec)
    cfg = AttackConfig(cfg.kind, cfg.gamma, cfg.alpha, cfg.iters, random_init=False)
    out = _signed_ascent(victim, x0, labels, specs, cfg, seed)
    return out[0] if single else out


def localized_patch(victim, x0, target_class, spec, cfg: AttackConfig | None = None, seed=0) -> np.ndarray:
    """Unbounded patch pixels pushed toward ``target_class`` by sign-gradient descent."""
    cfg = cfg or AttackConfig.localized()
    if cfg.kind is not AttackKind.LOCALIZED:
        raise ValueError(f"localized_patch got a {cfg.kind.value} config")
    single, x0, targets, specs = _as_batch(x0, target_class, spec)
    region = _patch_masks(specs, x0.shape[1])
    rng = np.random.default_rng(seed)
    x = np.where(region > 0, rng.uniform(0.0, 1.0, size=x0.shape), x0)
    for _ in range(cfg.iters):
        _, grad = victim.loss_and_input_grad(x, targets)
        x = np.where(region > 0, np.clip(x - cfg.alpha * np.sign(grad), 0.0, 1.0), x0)
    return x[0] if single else x


def run_attack(victim, x0, labels, specs, cfg: AttackConfig, seed=0, num_classes: int | None = None) -> np.ndarray:
    """Dispatch on ``cfg.kind``; the localized attack targets ``(label + 1) % num_classes``."""
    if cfg.kind is AttackKind.PGD:
        return pgd_patch(victim, x0, labels, specs, cfg, seed)
    if cfg.kind is AttackKind.FGSM:
        return fgsm_patch(victim, x0, labels, specs, cfg, seed)
    k = num_classes or victim.num_classes
    targets = (np.asarray(labels) + 1) % k
    return localized_patch(victim, x0, targets, specs, cfg, seed)
