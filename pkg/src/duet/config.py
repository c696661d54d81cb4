"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    name: str = "default"
    runs_dir: str = "runs"
    root_seed: int = 0
    # data
    m: int = 64
    n_classes: int = 4
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    n_calib: int = 60
    patch_side: int = 0  # 0 = largest side within the 2% area bound
    # victim
    victim_epochs: int = 10
    victim_lr: float = 0.01
    # attacks
    attack: str = "pgd"
    gamma: float = 0.3
    alpha: float = 0.05
    pgd_iters: int = 20
    localized_iters: int = 100
    # localizer
    mask: str = "1110"
    baseline_mask: str = "0000"
    prior: str = "iso_gaussian:1.0"
    channels: str = "16,32,64,64"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.001
    kl_weight: str = "auto"  # auto = 1 / (n_train * m * m)
    # inference
    n_samples: int = 30
    confidence: float = 90.0
    threshold_grid: int = 101
    ablation_masks: str = "0000,1000,1100,1110,1111,0001"

    @property
    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.channels.split(","))

    @property
    def kl_weight_value(self) -> float | None:
        return None if self.kl_weight == "auto" else float(self.kl_weight)

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_dir) / self.name

    @property
    def n_images(self) -> int:
        return self.n_train + self.n_val + self.n_test + self.n_calib

    def updated(self, overrides: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = _coerce(types[key], raw.strip())
        return dataclasses.replace(self, **values)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def _coerce(type_name, raw: str):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.updated(parse_pairs(Path(path).read_text().splitlines()))
    if overrides:
        cfg = cfg.updated(parse_pairs(overrides))
    return cfg
