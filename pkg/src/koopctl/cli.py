"""``koopctl identify|design|simulate|report --config <path> [--out <dir>]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import NumericalError, ValidationError
from .pipeline import cmd_design, cmd_identify, cmd_report, cmd_simulate, load_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_DIVERGENCE = 4

COMMANDS = {
    "identify": cmd_identify,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="koopctl", description="Koopman-based CLF design pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--lenient", action="store_true", help="exit 0 when only divergence warnings occur")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_output(args.out)
        result = COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"koopctl {args.command}: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"koopctl {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    warnings = []
    if isinstance(result, dict):
        warnings = result.get("diverged") or result.get("warnings") or []
    for w in warnings:
        print(f"koopctl {args.command}: warning: {w} diverged" if args.command == "simulate"
              else f"koopctl {args.command}: warning: {w}", file=sys.stderr)
    if warnings and args.command == "simulate" and not args.lenient:
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
