"""``mempert <command> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 config error, 2 verification failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import COMMANDS, load_config
from .errors import (
    ConfigError,
    ConvergenceFailure,
    DegeneratePosterior,
    InvalidParameter,
    LabelError,
    LeverageDegenerate,
    MempertError,
    NumericalFailure,
    ParseError,
    SingularCurvature,
)
from .experiments import run

log = logging.getLogger("mempert")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for failed verification
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mempert", description="Training-data sensitivity experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.command is not None and cfg.command != args.command:
            raise ConfigError("command", f"config is for {cfg.command!r}, not {args.command!r}")
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out_dir = args.out or cfg.output_dir
        outcome = run(args.command, cfg, out_dir)
        for path in outcome.write(out_dir):
            log.info("wrote %s", path)
    except (ConfigError, ParseError, LabelError, InvalidParameter, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, SingularCurvature, ConvergenceFailure, DegeneratePosterior, LeverageDegenerate) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except MempertError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    if not outcome.passed:
        failed = [k for k, v in outcome.summary["checks"].items() if not v["passed"]]
        print("verification failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
