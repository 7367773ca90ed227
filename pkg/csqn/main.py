"""Command-line entry point."""
import argparse
import sys
from typing import List, Optional

from csqn import __version__
from csqn.commands.experiments import cmd_run, cmd_sweep
from csqn.commands.reports import cmd_report
from csqn.config import configure_logging


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override (repeatable)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--threads", type=int, help="curvature sampling threads")
    parser.add_argument("--data", help="MNIST directory (default: $CSQN_DATA)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csqn",
        description="Continual learning with EWC and sampled quasi-Newton regularization",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="override CSQN_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="train one task sequence")
    _add_run_arguments(run)

    sweep = commands.add_parser("sweep", help="one run per grid value, best validation wins")
    _add_run_arguments(sweep)
    sweep.add_argument("--grid", required=True, help="e.g. lambda=1e2,1e3,1e4,1e5,1e6")
    sweep.add_argument("--workers", type=int, default=1, help="concurrent runs")

    report = commands.add_parser("report", help="average-accuracy curves for run directories")
    report.add_argument("run_dirs", nargs="+", help="finished run directories")
    report.add_argument("--out", help="report directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.out, args.seed, args.threads, args.data)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.grid, args.overrides, args.out, args.seed,
                         args.threads, args.data, workers=args.workers)
    return cmd_report(args.run_dirs, args.out)


if __name__ == "__main__":
    sys.exit(main())
