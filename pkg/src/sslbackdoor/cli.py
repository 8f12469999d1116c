"""Command line entry point.

Subcommands map to pipeline stages (plus `report` for table export); each
takes --config, --out, --force, and --stages to run additional stages in
the same invocation. Exit codes: 0 success, 2 config error, 3 missing
stage dependency, 4 training divergence.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, validate_config
from .pipeline import STAGES, StageDependencyError, emit_tables, run_pipeline
from .pretrain import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DIVERGENCE = 4

SUBCOMMANDS = STAGES + ("report",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sslbackdoor",
        description="Backdoor a contrastively pre-trained image encoder and measure the damage.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name in STAGES else "emit result tables")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--force", action="store_true", help="re-run even when artifacts exist")
        p.add_argument(
            "--stages",
            default=None,
            help=f"comma-separated extra stages to run, from: {', '.join(STAGES)}",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = validate_config(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = set()
    if args.command in STAGES:
        stages.add(args.command)
    if args.stages:
        for name in args.stages.split(","):
            name = name.strip()
            if name not in STAGES:
                print(f"config error: unknown stage {name!r}", file=sys.stderr)
                return EXIT_CONFIG
            stages.add(name)

    try:
        if stages:
            run_pipeline(cfg, sorted(stages), out_dir=args.out, force=args.force)
        if args.command == "report":
            out = args.out or cfg.output_dir
            tables = emit_tables(out)
            print(tables["summary.txt"])
    except StageDependencyError as exc:
        print(f"stage dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
