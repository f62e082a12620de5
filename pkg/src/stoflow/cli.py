"""Command line entry point: ``stoflow run | order | list``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .corpus import registry_listing
from .experiments import ConfigError, InsufficientDataError, estimate_order, load_config, read_rows, run, write_results


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stoflow", description="Verify stochastic transport identities numerically.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True, help="JSON experiment config")
    p_run.add_argument("--seed", type=_u64, help="master seed (overrides STOFLOW_SEED and the config)")
    p_run.add_argument("--out", help="CSV output path (default: the config's output)")
    p_run.add_argument("--workers", type=_positive, default=1, help="worker processes")
    p_run.add_argument("--timing", action="store_true", help="fill the wall_ms column (breaks byte-identity)")

    p_order = sub.add_parser("order", help="estimate convergence orders from a results CSV")
    p_order.add_argument("--in", dest="infile", required=True, help="results CSV")

    sub.add_parser("list", help="print the corpus registry")
    return parser


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, seed=args.seed)
        result = run(cfg, workers=args.workers, timing=args.timing)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    csv_path, json_path = write_results(result, args.out)
    summary = result.summary()
    print(json.dumps(summary))
    if result.error:
        print(f"blow-up: {result.error}", file=sys.stderr)
    print(f"wrote {csv_path} and {json_path}", file=sys.stderr)
    return result.exit_status


def _cmd_order(args) -> int:
    try:
        orders = estimate_order(read_rows(args.infile))
    except (InsufficientDataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, order in orders.items():
        print(f"{name}\t{order:.6g}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "order":
        return _cmd_order(args)
    for line in registry_listing():
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
