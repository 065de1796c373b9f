"""Command-line entry point: ``enkbf-nmpc <experiment> [options]``.

Exit status: 0 when the experiment passes its checks, 1 when a tolerance
check fails, 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import sys

from .config import KINDS, ConfigError, apply_overrides, default_config, load_config
from .experiments import run_experiment

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enkbf-nmpc",
                                     description="Ensemble Kalman-Bucy filter based nonlinear MPC experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="INI file; keys missing from it keep the defaults of this experiment")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--reps", type=int, help="number of repetitions")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key (repeatable)")
        p.add_argument("--quiet", action="store_true", help="print nothing but errors")
    return parser


def resolve_config(args):
    cfg = default_config(args.command)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    cfg = apply_overrides(cfg, overrides)
    if cfg.kind != args.command:
        raise ConfigError(f"config file describes a {cfg.kind!r} experiment, not {args.command!r}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        result = run_experiment(cfg, quiet=args.quiet)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        verdict = "PASS" if result.passed else "FAIL"
        print(f"{cfg.kind}: {verdict} ({result.wall_time:.1f} s, outputs in {cfg.out_dir})")
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
