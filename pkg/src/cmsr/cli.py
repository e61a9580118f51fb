"""Command line entry point: ``cmsr <stage> --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 training
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingPrerequisite, run_pipeline
from .training import TrainingDivergence
from .volumeio import NoLungRegionError, PatchFitError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_DIVERGENCE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmsr",
        description="Clinical-CT to micro-CT super-resolution trained on synthesized pairs.",
    )
    parser.add_argument("stage", choices=[*STAGES, "all"])
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    parser.add_argument("--out", default="cmsr-out", help="output directory (default: %(default)s)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"cmsr: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        outcomes = run_pipeline(cfg, args.stage, args.out)
    except ConfigError as exc:
        print(f"cmsr: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"cmsr: {exc} (run `cmsr {exc.stage}` first)", file=sys.stderr)
        return EXIT_PREREQUISITE
    except TrainingDivergence as exc:
        print(f"cmsr: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, NoLungRegionError, PatchFitError, ValueError) as exc:
        print(f"cmsr: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    for o in outcomes:
        note = "already complete, skipped" if o.status == "skipped" else "done"
        print(f"{o.stage}: {note}")
    table = Path(args.out) / "evaluate" / "comparison.txt"
    if any(o.stage == "evaluate" for o in outcomes) and table.is_file():
        print(table.read_text(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
