"""Command-line entry point: ``deconfrec <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .config import ExperimentConfig, load_config
from .data import generate_synthetic, write_interactions
from .errors import ConfigError, DataError, DeconfrecError, VerificationError
from .report import to_text
from .verify import SUITES, run_suite

log = logging.getLogger("deconfrec")

STEPS = {
    "ingest": pipeline.step_ingest,
    "group": pipeline.step_group,
    "train-stage1": pipeline.step_train_stage1,
    "train-stage2": pipeline.step_train_stage2,
    "evaluate": pipeline.step_evaluate,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="experiment YAML (defaults used if omitted)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--output-dir", "-o", help="override output_dir")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--parallel", dest="parallel", action="store_true", default=None,
                      help="compute group gradients in worker threads")
    mode.add_argument("--sequential", dest="parallel", action="store_false",
                      help="compute group gradients one after another (default)")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deconfrec",
        description="Deconfounded gradient aggregation with per-group plugins for "
                    "long-tailed sequential recommendation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("ingest", "load or generate interactions, split and negative-sample"),
                        ("group", "assign users to activeness groups"),
                        ("train-stage1", "train the trunk with aggregated gradients"),
                        ("train-stage2", "train per-group plugins on the stage-I trunk"),
                        ("evaluate", "score saved checkpoints and write reports")]:
        _common(sub.add_parser(name, help=help_))
    run = sub.add_parser("run", help="run every step end to end")
    _common(run)
    run.add_argument("--print-defaults", action="store_true",
                     help="print the fully resolved config and exit")
    gen = sub.add_parser("generate-synth", help="write a synthetic interaction log as CSV")
    _common(gen)
    gen.add_argument("--out", required=True, help="destination CSV")
    ver = sub.add_parser("verify", help="run built-in oracle suites")
    ver.add_argument("suites", nargs="*", default=["all"],
                     choices=sorted(SUITES) + ["all"], metavar="SUITE",
                     help=f"one or more of {', '.join(sorted(SUITES))}, or all")
    ver.add_argument("--verbose", "-v", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.parallel is not None:
        cfg.train.parallel = args.parallel
    return cfg


def cmd_verify(args) -> int:
    names = sorted(SUITES) if "all" in args.suites else args.suites
    failed = 0
    for name in names:
        for check in run_suite(name):
            print(check.line())
            failed += not check.passed
    print(f"{failed} check(s) failed" if failed else "all checks passed")
    if failed:
        raise VerificationError(f"{failed} verification check(s) failed")
    return 0


def dispatch(args) -> int:
    if args.command == "verify":
        return cmd_verify(args)
    cfg = resolve_config(args)
    if args.command == "run" and args.print_defaults:
        print(yaml.safe_dump(cfg.to_dict(), sort_keys=False), end="")
        return 0
    if args.command == "generate-synth":
        if cfg.dataset.kind != "synthetic":
            raise ConfigError("generate-synth needs dataset.kind: synthetic")
        cfg.validate()
        log_ = generate_synthetic(cfg.dataset.synth)
        write_interactions(log_, args.out)
        print(f"wrote {len(log_)} interactions for {log_.n_users} users to {args.out}")
        return 0
    if args.command == "run":
        result = pipeline.run_experiment(cfg)
        print(to_text(result.report), end="")
        print(f"outputs in {result.out_dir}")
        return 0
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        out = STEPS[args.command](cfg, out_dir)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if args.command == "evaluate":
        print(to_text(out), end="")
    print(f"{args.command}: done ({out_dir})")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except DeconfrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
