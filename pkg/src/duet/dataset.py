"""Synthetic textured-image corpus, splits, attacked-corpus assembly and corpus I/O."""

from __future__ import annotations

import colorsys
import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, PatchSpec, max_patch_side, place_patch, run_attack
from .seeding import derive_seed
from .tensor import load_dtf, save_dtf

SPLITS = ("train", "val", "test", "calib")


@dataclass
class Corpus:
    images: np.ndarray  # (n, m, m, 3) in [0, 1]
    labels: np.ndarray  # (n,) class ids for the victim
    masks: np.ndarray  # (n, m, m) binary, 1 = adversarial pixel
    split: np.ndarray  # (n,) split names
    ids: np.ndarray  # (n,) stable integer ids
    seed: int = 0
    manifest: list[dict] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.masks) == len(self.split) == len(self.ids) == n):
            raise ValueError("corpus fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def m(self) -> int:
        return self.images.shape[1]

    def subset(self, split: str) -> "Corpus":
        keep = self.split == split
        rows = [r for r, k in zip(self.manifest, keep) if k] if self.manifest else []
        return replace(self, images=self.images[keep], labels=self.labels[keep], masks=self.masks[keep],
                       split=self.split[keep], ids=self.ids[keep], manifest=rows)


def split_counts(n: int, val, test, calib=0) -> dict[str, int]:
    """Fractions (< 1) or absolute counts for the held-out splits; floor rounding, remainder to train."""

    def count(v):
        return int(np.floor(n * v)) if isinstance(v, float) and v < 1 else int(v)

    counts = {"val": count(val), "test": count(test), "calib": count(calib)}
    counts["train"] = n - sum(counts.values())
    if counts["train"] < 0:
        raise ValueError(f"held-out splits {counts} exceed {n} images")
    return counts


def assign_splits(n: int, counts: dict[str, int], seed: int) -> np.ndarray:
    labels = np.concatenate([np.full(counts.get(s, 0), s, dtype=object) for s in SPLITS])
    if len(labels) != n:
        raise ValueError("split counts must add up to the corpus size")
    perm = np.random.default_rng(derive_seed(seed, "splits")).permutation(n)
    out = np.empty(n, dtype=object)
    out[perm] = labels
    return out.astype(str)


def class_palette(n_classes: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(k / n_classes, 0.75, 0.85) for k in range(n_classes)])


def render_image(rng: np.random.Generator, m: int, label: int, n_classes: int) -> np.ndarray:
    """Class hue times a grating of class-dependent frequency, plus random blobs."""
    base = class_palette(n_classes)[label]
    yy, xx = np.mgrid[0:m, 0:m] / m
    freq = 2.0 + 3.0 * label
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = base[None, None, :] * (0.55 + 0.45 * grating[..., None])
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.06, 0.18)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        tint = np.clip(base + rng.normal(0, 0.15, size=3), 0, 1)
        img = img * (1 - 0.5 * blob[..., None]) + 0.5 * blob[..., None] * tint
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_corpus(seed: int, m: int = 64, n_images: int = 1060, n_classes: int = 4,
                    val=200, test=200, calib=60) -> Corpus:
    if m < 8 or n_images < 1:
        raise ValueError("need m >= 8 and at least one image")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    labels = np.random.default_rng(derive_seed(seed, "labels")).permutation(np.arange(n_images) % n_classes)
    images = np.stack([
        render_image(np.random.default_rng(derive_seed(seed, "image", i)), m, int(labels[i]), n_classes)
        for i in range(n_images)
    ])
    split = assign_splits(n_images, split_counts(n_images, val, test, calib), seed)
    return Corpus(images, labels.astype(np.int64), np.zeros((n_images, m, m)), split, np.arange(n_images), seed)


def victim_fingerprint(victim) -> str:
    h = hashlib.sha256()
    for key in sorted(victim.params):
        h.update(key.encode())
        h.update(np.ascontiguousarray(victim.params[key], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def build_attacked_corpus(corpus: Corpus, victim, cfg: AttackConfig | None, seed: int,
                          side: int | None = None, batch_size: int = 50) -> Corpus:
    """Patch every image of ``corpus`` with ``cfg`` (``None`` keeps it clean)."""
    m = corpus.m
    n = len(corpus)
    if cfg is None:
        rows = [dict(id=int(i), attack="none", top="", left="", side="", seed="", victim="") for i in corpus.ids]
        return replace(corpus, images=corpus.images.copy(), masks=np.zeros((n, m, m)), manifest=rows)
    side = side or max_patch_side(m)
    specs = [place_patch(derive_seed(seed, "patch", int(i)), m, side) for i in corpus.ids]
    fp = victim_fingerprint(victim)
    images = np.empty_like(corpus.images)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        images[sl] = run_attack(victim, corpus.images[sl], corpus.labels[sl], specs[sl], cfg,
                                seed=derive_seed(seed, "attack", cfg.kind.value, start))
    masks = np.stack([s.mask(m) for s in specs])
    rows = [dict(id=int(i), attack=cfg.kind.value, top=s.top, left=s.left, side=s.side,
                 seed=seed, victim=fp) for i, s in zip(corpus.ids, specs)]
    return replace(corpus, images=images, masks=masks, manifest=rows)


# ---------------------------------------------------------------------------
# directory format


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, i in enumerate(corpus.ids):
        save_dtf(directory / f"img_{int(i):06d}.dtf", corpus.images[k])
        save_dtf(directory / f"mask_{int(i):06d}.dtf", corpus.masks[k])
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        w.writerows([int(i), int(l)] for i, l in zip(corpus.ids, corpus.labels))
    with open(directory / "splits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        w.writerows([int(i), s] for i, s in zip(corpus.ids, corpus.split))
    if corpus.manifest:
        with open(directory / "manifest.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(corpus.manifest[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(corpus.manifest)


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    with open(directory / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["id"]) for r in rows], dtype=np.int64)
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    with open(directory / "splits.csv") as fh:
        split_of = {int(r["id"]): r["split"] for r in csv.DictReader(fh)}
    manifest = []
    if (directory / "manifest.csv").exists():
        with open(directory / "manifest.csv") as fh:
            manifest = list(csv.DictReader(fh))
    images = np.stack([load_dtf(directory / f"img_{i:06d}.dtf") for i in ids])
    masks = np.stack([load_dtf(directory / f"mask_{i:06d}.dtf") for i in ids])
    split = np.array([split_of[int(i)] for i in ids])
    return Corpus(images, labels, masks, split, ids, manifest=manifest)


def read_png(path: str | Path) -> np.ndarray:
    """8-bit truecolor PNG as an (H, W, 3) float64 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG" or im.mode != "RGB":
            raise ValueError(f"{path}: only 8-bit truecolor PNG is supported (got {im.format} {im.mode})")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask as an 8-bit PGM (0 background, 255 adversarial)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    body = np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body)
