"""Command line entry point: ``zorl {train-policy,run,report,datasets}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    EstimationError,
    SerializationError,
)
from ..numerics import RngStream
from ..objectives import load_idx_images, load_libsvm, save_libsvm, synthetic_heart_scale
from .config import KEYS, ExperimentConfig, build_config, read_config_file
from .experiment import RunFailure, run_experiment, task_from_config
from .reports import emit_reports, report_directory
from .training import train_rl_policy_cmd

logger = logging.getLogger("zorl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_setting_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    for key in KEYS:
        # raw strings; parsing and validation happen in build_config
        p.add_argument(f"--{key.name}", dest=key.attr, default=None, help=key.help)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zorl", description="Zeroth-order optimization with learned sampling policies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("train-policy", "train a DDPG sampling policy; --out is the actor artifact path"),
        ("run", "tune and compare algorithms; writes CSV and SVG files under --out"),
        ("report", "re-render SVG charts from the CSV files under --out"),
    ):
        _add_setting_flags(sub.add_parser(name, help=text, description=text))
    ds = sub.add_parser("datasets", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    fetch = ds_sub.add_parser("fetch", help="copy and validate a local dataset into a data directory")
    fetch.add_argument("name", help="dataset name, e.g. heart_scale")
    fetch.add_argument("--source", nargs="+", help="local file(s): one libsvm file, or IDX images and labels")
    fetch.add_argument("--out", default="data", help="destination directory")
    fetch.add_argument("--seed", type=int, default=0, help="seed for the synthetic stand-in")
    fetch.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args, **defaults) -> ExperimentConfig:
    file_values = {**defaults, **(read_config_file(args.config) if args.config else {})}
    overrides = {k.attr: getattr(args, k.attr) for k in KEYS}
    return build_config(file_values, overrides)


def cmd_run(args) -> int:
    cfg = _config(args).validate()
    task = task_from_config(cfg)
    series = run_experiment(cfg)
    written = emit_reports(series, cfg.out, task.label, cfg.update)
    summary = {
        "task": cfg.task,
        "update": cfg.update,
        "q": cfg.q,
        "mu": cfg.mu,
        "steps": cfg.steps,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "std": "population",
        "algorithms": {
            a: {
                "delta": s.hyper.delta,
                "beta1": s.hyper.beta1,
                "beta2": s.hyper.beta2,
                "aborted": s.aborted,
                "final_loss_mean": float(sum(s.final_losses) / len(s.final_losses)),
            }
            for a, s in series.items()
        },
    }
    summary_path = Path(cfg.out) / f"{task.label}_{cfg.update}_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for p in written + [summary_path]:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, out="actor.zorlnn")
    artifact, log_path, result = train_rl_policy_cmd(cfg)
    print(artifact)
    print(log_path)
    print(f"best greedy log10(f_T/f_0): {result.best_score:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    for p in report_directory(cfg.out):
        print(p)
    return EXIT_OK


def cmd_fetch(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.source:
        if args.name != "heart_scale":
            raise DataFormatError(f"no local source given for {args.name!r}; pass --source")
        # no network access: write a synthetic set in the same format and shape
        dest = out / "heart_scale"
        save_libsvm(synthetic_heart_scale(RngStream(args.seed, ("heart_scale",))), dest)
        load_libsvm(dest)
        print(dest)
        return EXIT_OK
    sources = [Path(s) for s in args.source]
    for s in sources:
        if not s.is_file():
            raise DataFormatError(f"source file {s} not found")
    if len(sources) == 1:
        data = load_libsvm(sources[0])
        dest = out / args.name
        shutil.copyfile(sources[0], dest)
        print(f"{dest}: {data.n} samples, {data.dim} features")
    elif len(sources) == 2:
        imgs = load_idx_images(sources[0], sources[1])
        for s in sources:
            shutil.copyfile(s, out / s.name)
            print(out / s.name)
        print(f"{imgs.n} images of shape {imgs.shape}")
    else:
        raise ConfigError("--source takes one libsvm file or an IDX image/label pair")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"zorl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {"run": cmd_run, "train-policy": cmd_train, "report": cmd_report}
    try:
        if args.command == "datasets":
            return cmd_fetch(args)
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"zorl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, SerializationError, FileNotFoundError) as exc:
        print(f"zorl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RunFailure, DivergenceError, EstimationError) as exc:
        print(f"zorl: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
