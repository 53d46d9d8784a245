"""Command line entry point.

Usage:
    python -m src.cli generate    --spec specs/oppq_anchored.json [--out DIR]
    python -m src.cli solve-exact --spec specs/oppq_anchored.json
    python -m src.cli run         --spec specs/oppq_anchored.json [--workers N] [--seed U64]
    python -m src.cli sweep       --spec specs/ppq_sweep_n.json
    python -m src.cli audit       --instance out/instance.json

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .env import get_settings
from .harness import cmd_audit, cmd_generate, cmd_run, cmd_solve_exact, cmd_sweep, load_spec

logger = logging.getLogger("src.cli")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILURE = 3

COMMANDS = ("generate", "solve-exact", "run", "sweep", "audit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linq", description="Parametric Q-learning experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--spec", type=Path, help="experiment spec (JSON)")
    parser.add_argument("--instance", type=Path, help="instance file (audit only)")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--workers", type=int, help="worker processes (default: LINQ_WORKERS)")
    parser.add_argument("--seed", type=int, help="override base_seed (u64)")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(levelname)s %(name)s %(message)s")

    if args.command == "audit":
        path = args.instance
        if path is None and args.spec is not None:
            spec = load_spec(args.spec)
            path = cmd_generate(spec, args.out or settings.out_dir)
        if path is None:
            raise ValueError("audit needs --instance or --spec")
        report = cmd_audit(path)
        print(json.dumps(report, indent=2, sort_keys=True), flush=True)
        return EXIT_OK if report["ok"] else EXIT_INVALID

    if args.spec is None:
        raise ValueError(f"{args.command} needs --spec")
    spec = load_spec(args.spec)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ValueError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        spec = replace(spec, base_seed=args.seed)
    out = args.out or (Path(spec.output) if spec.output else settings.out_dir)
    workers = args.workers if args.workers is not None else settings.workers
    if workers < 1:
        raise ValueError(f"--workers must be >= 1, got {workers}")

    if args.command == "generate":
        print(f"[linq] instance: {cmd_generate(spec, out)}", flush=True)
    elif args.command == "solve-exact":
        solution = cmd_solve_exact(spec, out)
        print(f"[linq] v* range [{solution.v_star.min():.6f}, {solution.v_star.max():.6f}]", flush=True)
    elif args.command == "run":
        summary = cmd_run(spec, out, workers)
        print(
            f"[linq] median error {summary['median_error']:.4f}, "
            f"success rate {summary['success_rate']:.2f} ({summary['failures']} failed)",
            flush=True,
        )
    else:
        summary = cmd_sweep(spec, out, workers)
        for row in summary["rows"]:
            print(f"[linq] {row['axis']}={row['value']}: median error {row['median_error']:.4f}", flush=True)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ValueError as e:
        print(f"[linq] invalid input: {e}", file=sys.stderr, flush=True)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        logger.exception("[linq] %s failed", args.command)
        print(f"[linq] failed: {e}", file=sys.stderr, flush=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
