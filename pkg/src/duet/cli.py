"""``duetctl``: run the localization pipeline stage by stage."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config

COMMANDS = (
    "train-victim",
    "gen-data",
    "train-localizer",
    "select-threshold",
    "calibrate",
    "duet-infer",
    "evaluate",
    "ablation",
    "run-all",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duetctl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if name == "duet-infer":
            p.add_argument("input_dir")
            p.add_argument("--mask", help="placement mask to run (default: config mask)")
        if name == "evaluate":
            p.add_argument("pred_dir")
            p.add_argument("truth_dir")
    return parser


def run_all(cfg) -> None:
    pipeline.train_victim_stage(cfg)
    pipeline.gen_data_stage(cfg)
    pipeline.train_localizer_stage(cfg)
    pipeline.select_threshold_stage(cfg)
    pipeline.calibrate_stage(cfg)
    for mask in pipeline.stage_masks(cfg):
        for name in pipeline.TEST_SETS:
            pred = pipeline.duet_infer_stage(cfg, cfg.run_dir / "data" / name, mask)
            pipeline.evaluate_stage(cfg, pred, cfg.run_dir / "data" / name)


def dispatch(args) -> object:
    cfg = load_config(args.config, args.set)
    cmd = args.command
    if cmd == "train-victim":
        return pipeline.train_victim_stage(cfg)
    if cmd == "gen-data":
        return pipeline.gen_data_stage(cfg)
    if cmd == "train-localizer":
        return pipeline.train_localizer_stage(cfg)
    if cmd == "select-threshold":
        return pipeline.select_threshold_stage(cfg)
    if cmd == "calibrate":
        return pipeline.calibrate_stage(cfg)
    if cmd == "duet-infer":
        return pipeline.duet_infer_stage(cfg, args.input_dir, args.mask)
    if cmd == "evaluate":
        return pipeline.evaluate_stage(cfg, args.pred_dir, args.truth_dir)
    if cmd == "ablation":
        return pipeline.ablation_stage(cfg)
    return run_all(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        out = dispatch(args)
    except Exception as exc:  # one parseable line per failure
        stage = getattr(exc, "stage", "")
        msg = str(exc).replace("\n", " ")
        print(f"error command={args.command} kind={type(exc).__name__} needs={stage or '-'} message={msg}", file=sys.stderr)
        return 1
    if out is not None:
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
