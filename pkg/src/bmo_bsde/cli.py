"""Command-line entry point: one subcommand per experiment, each writing a CSV table and a JSON report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import RUNNERS, ConfigError, ExperimentConfig, run_subcommand, write_outputs

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_IO = 4
EXIT_UNKNOWN_COMMAND = 5


class UsageError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        code = EXIT_UNKNOWN_COMMAND if "invalid choice" in message else EXIT_CONFIG
        raise UsageError(message, code)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--lambda", dest="lam", type=float, help="constant integrand of M")
    common.add_argument("--p", type=float, action="append", help="exponent p (repeatable)")
    common.add_argument("--beta", type=float, help="fixed beta for the BMO bounds (default: minimised)")
    common.add_argument("--norm", type=float, action="append", help="BMO norm for closed-form constants (repeatable)")
    common.add_argument("--paths", type=int, help="number of simulated paths")
    common.add_argument("--steps", type=int, help="number of grid steps")
    common.add_argument("--T", dest="horizon", type=float, help="time horizon")
    common.add_argument("--seed", type=int, help="simulation seed")
    common.add_argument("--out", help="output directory (default: $BMO_BSDE_OUT or ./results)")
    common.add_argument("-v", "--verbose", action="store_true", help="log stage timings")

    parser = _Parser(prog="bmo-bsde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in RUNNERS.items():
        doc = (fn.__doc__ or name).strip().splitlines()[0]
        sub.add_parser(name, parents=[common], help=doc, description=doc)
    sub.add_parser("write-config", parents=[common], help="print the effective config as INI")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.lam is not None:
        changes["M"] = f"const:{args.lam!r}"
        changes["lambdas"] = (args.lam,)
    if args.p:
        changes["p"] = tuple(args.p)
    if args.beta is not None:
        changes["beta"] = args.beta
    if args.norm:
        changes["norms"] = tuple(args.norm)
    for key, attr in (("paths", "n_paths"), ("steps", "n_steps"), ("horizon", "horizon"), ("seed", "seed"),
                      ("out", "out")):
        val = getattr(args, key)
        if val is not None:
            changes[attr] = val
    return cfg.replace(**changes) if changes else cfg


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "write-config":
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    result = run_subcommand(args.command, cfg)
    try:
        paths = write_outputs(args.command, result, cfg.output_dir())
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    rep = result.report
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.measured:.6g} {c.relation} {c.bound:.6g}"
              f" (tol {c.tolerance:.3g}) [{c.anchor}]")
    for e in rep.errors:
        print(f"ERROR in stage {e['stage']}: {e['error']}")
    print("wrote " + ", ".join(str(p) for p in paths))
    if rep.errors:
        return EXIT_STAGE
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
