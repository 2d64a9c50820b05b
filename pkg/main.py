#! /usr/bin/env python
import typing as t
from Util import PipelineError, format_float
import argparse
import logging
import sys
import pyperclip
import Runner
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
logger = logging.getLogger("main")


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def add_run_options(parser: argparse.ArgumentParser, charts: bool = False) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="YAML run config (see Help/Config.txt). Without it every setting takes its default and "
                             "data is read from ./Data.")
    parser.add_argument("--out", type=str, default=None, help="Output directory; overrides 'out_dir' of the config.")
    parser.add_argument("--jobs", type=int, default=None,
                        help="Worker threads for per-symbol stages; 0 uses every available CPU.")
    parser.add_argument("--keep-going", action="store_true",
                        help="Skip symbols that fail instead of aborting, and record them in failures.csv. The exit "
                             "status is still 1 if any symbol failed.")
    if charts:
        parser.add_argument("--charts", action="store_true",
                            help="Also render SVG equity and monthly-return charts under charts/.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Trains one decision tree per equity on one-minute bars, backtests "
                                                 "its long/flat signals against buy-and-hold and reports the "
                                                 "results. Put the '-h' flag *after* a sub-command to get help on "
                                                 "it.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug detail.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only.")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="sub-command",
                                       help="Pipeline stage or tool to run.")
    stage_help = {"ingest": "Validate and adjust raw bars; writes bars/SYMBOL.csv.",
                  "align": "Align the universe per range; writes panels/{train,test}/.",
                  "features": "Compute features and labels; writes features/{train,test}/SYMBOL.csv.",
                  "train": "Fit one tree per symbol; writes models/ and rules/.",
                  "backtest": "Backtest both ranges; writes backtests/ and trades/ besides models/ and rules/."}
    for stage, text in stage_help.items():
        add_run_options(subparsers.add_parser(stage, help=text))
    add_run_options(subparsers.add_parser("report", help="Rebuild reports/ from the backtest CSVs under the output "
                                                         "directory."), charts=True)
    add_run_options(subparsers.add_parser("run", help="Full pipeline: models, rule exports, backtests, trades and "
                                                      "train/test reports."), charts=True)
    sweep = subparsers.add_parser("sweep-depth", help="Refit at several depths and tabulate the test-range average "
                                                      "portfolio in sweep_depth.csv.")
    add_run_options(sweep)
    sweep.add_argument("--depths", type=str, default=",".join(map(str, Runner.DEFAULT_DEPTHS)),
                       help="Comma-separated tree depths, e.g. 3,4,5,6.")
    export = subparsers.add_parser("export-tree", help="Print a model document as rule text or DOT, followed by the "
                                                       "features it uses.")
    export.add_argument("model", type=str, help="Path of a models/SYMBOL.json document.")
    export.add_argument("--format", choices=["rules", "dot"], default="rules", help="Export format.")
    export.add_argument("--out", type=str, default=None,
                        help="Directory to write <model name>.txt or .dot into instead of printing the export.")
    export.add_argument("--copy", action="store_true", help="Also copy the export to the clipboard.")
    return parser


def run_export(args: argparse.Namespace) -> int:
    export = Runner.export_tree(args.model, args.format, args.out)
    if export.written is None:
        print(export.text, end="")
    else:
        logger.info("Wrote %s", export.written)
    if args.copy:
        try:
            pyperclip.copy(export.text)
        except pyperclip.PyperclipException as error:
            logger.warning("Could not copy the export to the clipboard: %s", error)
    print("features used: {}".format(", ".join(sorted(export.usage)) or "none"))
    ranked = sorted(export.importance.items(), key=lambda item: (-item[1], item[0]))
    print("importance: {}".format(", ".join("{}={}".format(name, format_float(value))
                                            for name, value in ranked if value > 0) or "none"))
    return 0


def run_command(args: argparse.Namespace) -> int:
    if args.command == "export-tree":
        return run_export(args)
    config = Runner.override(Runner.load_config(args.config), out_dir=args.out, jobs=args.jobs)
    if args.command == "sweep-depth":
        summary = Runner.sweep_depth(config, Runner.parse_depths(args.depths), args.keep_going)
    elif args.command == "report":
        summary = Runner.rebuild_reports(config, args.charts)
    else:
        until = "report" if args.command == "run" else args.command
        summary = Runner.run_pipeline(config, args.keep_going, getattr(args, "charts", False), until)
    if summary.failures:
        logger.error("%d symbol(s) failed: %s", len(summary.failures), ", ".join(summary.failures))
        return 1
    return 0


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    """Returns the exit status: 0 on success, 1 for pipeline and data errors, 2 for config and usage errors
    (argparse exits with 2 on its own)."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return run_command(args)
    except Runner.ConfigError as error:
        logger.error("%s", error)
        return 2
    except PipelineError as error:
        logger.error("%s", error)
        return 1


if __name__ == "__main__":
    sys.exit(main())
