"""End-to-end experiment stages shared by the CLI, the scripts and the acceptance suite.

The functions in the first half work purely in memory; the ``*_stage``
functions in the second half read and write a run directory laid out as
``runs/<name>/<stage>/``.  All randomness is derived from ``root_seed``
through named streams.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, AttackKind
from .calibration import CalibrationModel, fit_calibration, reference_probabilities
from .config import RunConfig
from .dataset import Corpus, build_attacked_corpus, generate_corpus, load_corpus, read_png, save_corpus, write_pgm
from .localize import DuetConfig, duet_localize_batch, mean_maps
from .metrics import MetricReport, evaluate_masks, report_to_csv
from .model import (
    LocalizerModel,
    VictimClassifier,
    accuracy,
    build_localizer,
    mc_predict,
    train_localizer,
    train_victim,
)
from .seeding import derive_seed
from .tensor import load_dtf, save_dtf
from .threshold import brier_score, curve_to_csv, default_grid, pr_curve, select_threshold
from .variational import prior_from_string

log = logging.getLogger(__name__)

TEST_SETS = ("test_pgd", "test_fgsm", "test_localized", "test_clean")


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, stage: str):
        super().__init__(f"missing {what}; run the '{stage}' stage first")
        self.stage = stage


def attack_config(cfg: RunConfig, kind: str) -> AttackConfig:
    kind = AttackKind(kind)
    if kind is AttackKind.PGD:
        return AttackConfig.pgd(cfg.gamma, cfg.alpha, cfg.pgd_iters)
    if kind is AttackKind.FGSM:
        return AttackConfig.fgsm(cfg.gamma, cfg.alpha, cfg.pgd_iters)
    return AttackConfig.localized(cfg.alpha, cfg.localized_iters)


# ---------------------------------------------------------------------------
# in-memory building blocks


def make_clean_corpus(cfg: RunConfig) -> Corpus:
    return generate_corpus(derive_seed(cfg.root_seed, "corpus"), cfg.m, cfg.n_images, cfg.n_classes,
                           val=cfg.n_val, test=cfg.n_test, calib=cfg.n_calib)


def fit_victim(cfg: RunConfig, corpus: Corpus) -> VictimClassifier:
    train = corpus.subset("train")
    return train_victim(train.images, train.labels, cfg.n_classes, epochs=cfg.victim_epochs, lr=cfg.victim_lr,
                        seed=derive_seed(cfg.root_seed, "victim"))


def make_attacked_sets(cfg: RunConfig, corpus: Corpus, victim) -> dict[str, Corpus]:
    """Training-side splits attacked with ``cfg.attack``; the test split under every attack and clean."""
    side = cfg.patch_side or None
    sets = {}
    for split in ("train", "val", "calib"):
        sets[split] = build_attacked_corpus(corpus.subset(split), victim, attack_config(cfg, cfg.attack),
                                            derive_seed(cfg.root_seed, "attack", split), side)
    test = corpus.subset("test")
    for kind in ("pgd", "fgsm", "localized"):
        sets[f"test_{kind}"] = build_attacked_corpus(test, victim, attack_config(cfg, kind),
                                                     derive_seed(cfg.root_seed, "attack", "test", kind), side)
    sets["test_clean"] = build_attacked_corpus(test, victim, None, 0)
    return sets


def fit_localizer(cfg: RunConfig, mask: str, train: Corpus, progress: bool = False):
    model = build_localizer(mask, prior_from_string(cfg.prior), cfg.m, cfg.channel_tuple,
                            seed=derive_seed(cfg.root_seed, "localizer-init", mask))
    trace = train_localizer(model, train.images, train.masks, epochs=cfg.epochs, batch_size=cfg.batch_size,
                            lr=cfg.lr, kl_weight=cfg.kl_weight_value,
                            seed=derive_seed(cfg.root_seed, "localizer-train", mask), progress=progress)
    return model, trace


def choose_threshold(cfg: RunConfig, model: LocalizerModel, val: Corpus):
    probs = mean_maps(model, val.images, cfg.n_samples, derive_seed(cfg.root_seed, "val-mc", str(model.mask)))
    curve = pr_curve(probs, val.masks, default_grid(cfg.threshold_grid))
    t = select_threshold(curve)
    return t, curve, brier_score(probs, val.masks)


def fit_model_calibration(cfg: RunConfig, bayes: LocalizerModel, baseline: LocalizerModel,
                          baseline_threshold: float, calib: Corpus) -> CalibrationModel:
    ref, included = reference_probabilities(baseline, calib.images, calib.masks, baseline_threshold)
    seed = derive_seed(cfg.root_seed, "calib-mc", str(bayes.mask))
    samples = np.concatenate([mc_predict(bayes, calib.images[s : s + 25], cfg.n_samples, seed)
                              for s in range(0, len(calib), 25)], axis=1)
    return fit_calibration(samples, ref, included)


def localize_images(cfg: RunConfig, model: LocalizerModel, threshold: float,
                    calibration: CalibrationModel | None, images: np.ndarray, seed: int):
    """DUET masks for Bayesian models, MC-mean thresholding otherwise.

    Returns ``(masks, windows)`` where ``windows`` holds the calibrated upper
    windows (DUET) or the mean maps (baseline).
    """
    if model.is_bayesian:
        dcfg = DuetConfig(threshold, calibration or CalibrationModel.identity(), cfg.confidence, cfg.n_samples)
        results = duet_localize_batch(model, images, dcfg, seed)
        return np.stack([r.mask for r in results]), np.stack([r.upper_windows for r in results])
    means = mean_maps(model, images, 1, seed)
    return (means >= threshold).astype(np.float64), means


@dataclass
class TrendResult:
    seed: int
    reports: dict[tuple[str, str], tuple[str, MetricReport]]  # (mask, set) -> (metric, report)
    thresholds: dict[str, float]


def trend_experiment(cfg: RunConfig, masks=("0000", "1110"), progress: bool = False) -> TrendResult:
    """Train each placement on the attacked corpus and score it on every test set."""
    corpus = make_clean_corpus(cfg)
    victim = fit_victim(cfg, corpus)
    sets = make_attacked_sets(cfg, corpus, victim)
    models, thresholds = {}, {}
    for mask in dict.fromkeys((cfg.baseline_mask,) + tuple(masks)):
        models[mask], _ = fit_localizer(cfg, mask, sets["train"], progress)
        thresholds[mask], _, _ = choose_threshold(cfg, models[mask], sets["val"])
    base = models[cfg.baseline_mask]
    reports = {}
    for mask in masks:
        model = models[mask]
        calib = None
        if model.is_bayesian:
            calib = fit_model_calibration(cfg, model, base, thresholds[cfg.baseline_mask], sets["calib"])
        for name in TEST_SETS:
            ts = sets[name]
            preds, _ = localize_images(cfg, model, thresholds[mask], calib, ts.images,
                                       derive_seed(cfg.root_seed, "infer", mask, name))
            reports[(mask, name)] = evaluate_masks(ts.ids, preds, ts.masks)
    return TrendResult(cfg.root_seed, reports, thresholds)


UNSEEN_SETS = ("test_fgsm", "test_localized")


def pooled_std(res: TrendResult, mask: str, sets=UNSEEN_SETS) -> float:
    """Population std of per-image scores pooled across ``sets``."""
    return float(np.std([s for name in sets for _, s in res.reports[(mask, name)][1].per_image]))


def trend_checks(res: TrendResult, baseline: str = "0000", bayes: str = "1110") -> dict[str, bool]:
    checks = {f"mean_{name}": res.reports[(bayes, name)][1].mean >= res.reports[(baseline, name)][1].mean
              for name in UNSEEN_SETS}
    checks["pooled_std"] = pooled_std(res, bayes) <= pooled_std(res, baseline)
    return checks


# ---------------------------------------------------------------------------
# run-directory stages


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} ({path})", stage)
    return path


def write_resolved_config(cfg: RunConfig, stage_dir: Path) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "config.resolved.txt").write_text(cfg.to_text())


def train_victim_stage(cfg: RunConfig) -> Path:
    out = cfg.run_dir / "victim"
    corpus = make_clean_corpus(cfg)
    victim = fit_victim(cfg, corpus)
    victim.save(out)
    train = corpus.subset("train")
    (out / "accuracy.txt").write_text(f"train_accuracy={accuracy(victim, train.images, train.labels)!r}\n")
    write_resolved_config(cfg, out)
    return out


def gen_data_stage(cfg: RunConfig) -> Path:
    victim_dir = _require(cfg.run_dir / "victim" / "config.txt", "victim checkpoint", "train-victim").parent
    victim = VictimClassifier.load(victim_dir)
    corpus = make_clean_corpus(cfg)
    out = cfg.run_dir / "data"
    for name, ds in make_attacked_sets(cfg, corpus, victim).items():
        save_corpus(ds, out / name)
    write_resolved_config(cfg, out)
    return out


def _load_set(cfg: RunConfig, name: str) -> Corpus:
    path = _require(cfg.run_dir / "data" / name / "labels.csv", f"data set {name!r}", "gen-data").parent
    return load_corpus(path)


def stage_masks(cfg: RunConfig) -> list[str]:
    return list(dict.fromkeys([cfg.baseline_mask, cfg.mask]))


def localizer_dir(cfg: RunConfig, mask: str) -> Path:
    return cfg.run_dir / f"localizer_{mask}"


def train_localizer_stage(cfg: RunConfig, masks: list[str] | None = None) -> list[Path]:
    train = _load_set(cfg, "train")
    outs = []
    for mask in masks or stage_masks(cfg):
        model, trace = fit_localizer(cfg, mask, train, progress=True)
        out = localizer_dir(cfg, mask)
        model.save(out)
        (out / "loss.csv").write_text(trace.to_csv())
        write_resolved_config(cfg, out)
        outs.append(out)
    return outs


def load_localizer(cfg: RunConfig, mask: str) -> LocalizerModel:
    d = _require(localizer_dir(cfg, mask) / "config.txt", f"localizer {mask}", "train-localizer").parent
    return LocalizerModel.load(d)


def _read_kv(path: Path) -> dict[str, str]:
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def load_threshold(cfg: RunConfig, mask: str) -> float:
    path = _require(cfg.run_dir / "threshold" / f"threshold_{mask}.txt", f"threshold for {mask}", "select-threshold")
    return float(_read_kv(path)["threshold"])


def select_threshold_stage(cfg: RunConfig, masks: list[str] | None = None) -> Path:
    val = _load_set(cfg, "val")
    out = cfg.run_dir / "threshold"
    out.mkdir(parents=True, exist_ok=True)
    for mask in masks or stage_masks(cfg):
        t, curve, brier = choose_threshold(cfg, load_localizer(cfg, mask), val)
        (out / f"curve_{mask}.csv").write_text(curve_to_csv(curve))
        best = next(p for p in curve if p.threshold == t)
        (out / f"threshold_{mask}.txt").write_text(
            f"threshold={float(t)!r}\nf1={float(best.f1)!r}\nbrier_probabilistic={float(brier)!r}\n")
    write_resolved_config(cfg, out)
    return out


def calibration_path(cfg: RunConfig, mask: str) -> Path:
    return cfg.run_dir / "calibration" / f"calibration_{mask}.csv"


def calibrate_stage(cfg: RunConfig, masks: list[str] | None = None) -> Path:
    calib = _load_set(cfg, "calib")
    base = load_localizer(cfg, cfg.baseline_mask)
    t_base = load_threshold(cfg, cfg.baseline_mask)
    out = cfg.run_dir / "calibration"
    out.mkdir(parents=True, exist_ok=True)
    for mask in masks or stage_masks(cfg):
        model = load_localizer(cfg, mask)
        if not model.is_bayesian:
            continue
        fit_model_calibration(cfg, model, base, t_base, calib).save(calibration_path(cfg, mask))
    write_resolved_config(cfg, out)
    return out


def _load_inputs(input_dir: Path):
    if (input_dir / "labels.csv").exists():
        corpus = load_corpus(input_dir)
        return corpus.ids, corpus.images
    pngs = sorted(input_dir.glob("*.png"))
    if not pngs:
        raise FileNotFoundError(f"{input_dir} holds neither a corpus (labels.csv) nor PNG files")
    return np.arange(len(pngs)), np.stack([read_png(p) for p in pngs])


def duet_infer_stage(cfg: RunConfig, input_dir: str | Path, mask: str | None = None, out_name: str | None = None) -> Path:
    input_dir = Path(input_dir)
    mask = mask or cfg.mask
    model = load_localizer(cfg, mask)
    t = load_threshold(cfg, mask)
    calib = None
    if model.is_bayesian:
        calib = CalibrationModel.load(_require(calibration_path(cfg, mask), f"calibration for {mask}", "calibrate"))
    ids, images = _load_inputs(input_dir)
    if images.shape[1:] != (model.m, model.m, 3):
        raise ValueError(f"inputs have shape {images.shape[1:]}, model expects ({model.m}, {model.m}, 3)")
    preds, windows = localize_images(cfg, model, t, calib, images, derive_seed(cfg.root_seed, "infer", mask, input_dir.name))
    out = cfg.run_dir / "infer" / (out_name or f"{input_dir.name}_{mask}")
    out.mkdir(parents=True, exist_ok=True)
    rows = ["id,adversarial_pixels,mean_upper_window"]
    for i, p, w in zip(ids, preds, windows):
        save_dtf(out / f"mask_{int(i):06d}.dtf", p)
        write_pgm(out / f"mask_{int(i):06d}.pgm", p)
        rows.append(f"{int(i)},{int(p.sum())},{float(w.mean())!r}")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    write_resolved_config(cfg, out)
    return out


def evaluate_stage(cfg: RunConfig, pred_dir: str | Path, truth_dir: str | Path) -> Path:
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    truth = load_corpus(_require(truth_dir / "labels.csv", "truth corpus", "gen-data").parent)
    preds = np.stack([load_dtf(_require(pred_dir / f"mask_{int(i):06d}.dtf", f"prediction {int(i)}", "duet-infer"))
                      for i in truth.ids])
    metric, report = evaluate_masks(truth.ids, preds, truth.masks)
    out = cfg.run_dir / "eval" / pred_dir.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(metric, report))
    write_resolved_config(cfg, out)
    return out / "report.csv"


def ablation_stage(cfg: RunConfig) -> Path:
    masks = [m.strip() for m in cfg.ablation_masks.split(",") if m.strip()]
    needs_baseline = any(m != cfg.baseline_mask for m in masks)
    todo = list(dict.fromkeys(([cfg.baseline_mask] if needs_baseline else []) + masks))
    missing = [m for m in todo if not (localizer_dir(cfg, m) / "config.txt").exists()]
    if missing:
        train_localizer_stage(cfg, missing)
    select_threshold_stage(cfg, todo)
    calibrate_needed = [m for m in masks if m != cfg.baseline_mask]
    if calibrate_needed:
        calibrate_stage(cfg, calibrate_needed)
    rows = ["mask,set,metric,mean,std"]
    out = cfg.run_dir / "ablation"
    for mask in masks:
        for name in TEST_SETS:
            pred = duet_infer_stage(cfg, cfg.run_dir / "data" / name, mask)
            report_path = evaluate_stage(cfg, pred, cfg.run_dir / "data" / name)
            with open(report_path) as fh:
                summary = {r["id"]: r for r in csv.DictReader(fh) if r["id"] in ("mean", "std")}
            rows.append(f"{mask},{name},{summary['mean']['metric']},{summary['mean']['value']},{summary['std']['value']}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "trend.csv").write_text("\n".join(rows) + "\n")
    write_resolved_config(cfg, out)
    return out / "trend.csv"
