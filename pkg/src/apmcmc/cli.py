"""Command-line entry points: run, validate, diagnose.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .harness import (
    diagnose_traces,
    run_experiment,
    validate_config,
    validate_config_dict,
)

OUT_DIR_ENV = "APMCMC_OUT_DIR"


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="apmcmc",
        description="Composable MCMC for unbiased density estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config", help="path to a JSON config file")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    run_p.add_argument("--out", default=None,
                       help="output directory (default: runs/<config stem>, "
                            f"base dir overridable via ${OUT_DIR_ENV})")
    run_p.add_argument("--chains", type=int, default=None,
                       help="override the number of chains")
    run_p.add_argument("--workers", type=int, default=None,
                       help="max parallel worker processes")

    val_p = sub.add_parser("validate", help="validate a config file")
    val_p.add_argument("config", help="path to a JSON config file")

    diag_p = sub.add_parser(
        "diagnose", help="recompute summary.json from trace CSVs"
    )
    diag_p.add_argument("trace_dir", help="directory holding chain_*.csv")
    return parser


def _resolve_out_dir(args):
    if args.out is not None:
        return Path(args.out)
    base = Path(os.environ.get(OUT_DIR_ENV, "runs"))
    return base / Path(args.config).stem


def _cmd_run(args):
    config, errors = validate_config(args.config)
    if not errors and (args.seed is not None or args.chains is not None):
        if args.seed is not None:
            config["seed"] = args.seed
        if args.chains is not None:
            config["n_chains"] = args.chains
        config, errors = validate_config_dict(config)
    if errors:
        for msg in errors:
            print(msg, file=sys.stderr)
        return 1
    out_dir = _resolve_out_dir(args)
    try:
        result = run_experiment(config, out_dir, max_workers=args.workers)
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if not result["ok"]:
        for failure in result["errors"]:
            print(
                f"chain error: {failure.get('error', 'unknown')}",
                file=sys.stderr,
            )
        print(f"partial outputs in {result['out_dir']}", file=sys.stderr)
        return 2
    print(result["out_dir"])
    return 0


def _cmd_validate(args):
    config, errors = validate_config(args.config)
    if errors:
        for msg in errors:
            print(msg, file=sys.stderr)
        return 1
    print(json.dumps(config, indent=2, sort_keys=True))
    return 0


def _cmd_diagnose(args):
    try:
        summary = diagnose_traces(args.trace_dir)
    except (FileNotFoundError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def run_cli(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "validate":
        return _cmd_validate(args)
    return _cmd_diagnose(args)


def main():
    raise SystemExit(run_cli())
