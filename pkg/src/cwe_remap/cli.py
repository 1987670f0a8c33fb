#!/usr/bin/env python3
"""
cwe-remap - rank Allowed CWE replacements for invalid CVE-to-CWE mappings.

Subcommands run one pipeline stage each and write their artifacts under
``<out>/<command>/``. Errors are printed as one JSON line on stderr and the
process exits with the error's code (2 config, 3 data, 4 numeric divergence).
"""

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

from rich.console import Console

from .config import load_config
from .errors import CweRemapError
from .logs import configure_logging
from .pipeline import (
    output_lock,
    run_evaluate,
    run_exploits,
    run_fix,
    run_ingest,
    run_longitudinal,
    run_retrain_eval,
    run_snapshot,
    run_train,
)
from .reports import coverage_rows, metrics_rows, print_table

COMMANDS = ("ingest", "snapshot", "longitudinal", "train", "fix", "evaluate", "retrain-eval", "exploits")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (flat dotted or nested keys)")
    common.add_argument("--out", type=Path, help="Output directory (overrides 'out')")
    common.add_argument("--seed", type=int, help="Random seed for training and splits")
    common.add_argument("--threads", type=int, help="Worker threads for training and ranking")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only log warnings and errors")

    parser = argparse.ArgumentParser(
        prog="cwe-remap",
        description="Find better CWE mappings for CVEs mapped to Prohibited or Discouraged CWEs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[common], help="Parse (and optionally download) the input data")
    ingest.add_argument("--fetch", action="store_true", help="Download CVEs, history, KEV and Exploit-DB first")
    ingest.add_argument("--from", dest="start", type=date.fromisoformat, help="First publication/change date")
    ingest.add_argument("--to", dest="end", type=date.fromisoformat, help="Last publication/change date")

    snapshot = sub.add_parser("snapshot", parents=[common], help="Build and save the graph at a date")
    snapshot.add_argument("--as-of", type=date.fromisoformat, help="Snapshot date (YYYY-MM-DD)")

    longitudinal = sub.add_parser("longitudinal", parents=[common], help="Remap statistics over the change history")
    longitudinal.add_argument("--from", dest="start", type=date.fromisoformat, help="First change date (whole history by default)")
    longitudinal.add_argument("--to", dest="end", type=date.fromisoformat, help="Last change date (validation date by default)")

    sub.add_parser("train", parents=[common], help="Train embeddings on the training snapshot")

    ranking = argparse.ArgumentParser(add_help=False)
    ranking.add_argument("--strategy", help="Candidate strategy (cwe1003, top25, descendants, family, members, members_fnn, tailored)")
    ranking.add_argument("--model", type=Path, help="Use a trained model file instead of training")

    fix = sub.add_parser("fix", parents=[common, ranking], help="Rank replacements for invalid mappings")
    fix.add_argument("--status", choices=["prohibited", "discouraged"], help="Population to fix (both by default)")
    fix.add_argument("--top-n", type=int, choices=[1, 2, 3], help="Predictions inserted per fixed mapping")

    evaluate = sub.add_parser("evaluate", parents=[common, ranking], help="Score rankings against later remaps")
    evaluate.add_argument("--status", choices=["prohibited", "discouraged"], help="Population to evaluate")

    retrain = sub.add_parser("retrain-eval", parents=[common], help="Retrain on fixed graphs and compare completion")
    retrain.add_argument("--strategy", help="Candidate strategy for both populations")
    retrain.add_argument("--mode", choices=["open", "closed"], default="open", help="Evaluation setting")
    retrain.add_argument("--top-n", type=int, choices=[1, 2, 3], action="append", help="Fixed graphs to compare")

    sub.add_parser("exploits", parents=[common, ranking], help="Relate predictions to exploitation dates")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {"seed": args.seed, "threads": args.threads, "out": str(args.out) if args.out else None}
    if getattr(args, "command", None) == "fix" and args.top_n:
        overrides["evaluation.top_n"] = args.top_n
    if getattr(args, "command", None) == "retrain-eval" and args.top_n:
        overrides["evaluation.compare_top_n"] = sorted(set(args.top_n))
    return overrides


def run(args: argparse.Namespace, console: Console) -> None:
    """Dispatch one parsed command."""
    config = load_config(args.config, _overrides(args))
    with output_lock(config.out):
        if args.command == "ingest":
            outputs = run_ingest(config, args.fetch, args.start, args.end)
        elif args.command == "snapshot":
            outputs = run_snapshot(config, args.as_of)
        elif args.command == "longitudinal":
            outputs = run_longitudinal(config, args.start, args.end)
        elif args.command == "train":
            outputs = run_train(config)
        elif args.command == "fix":
            outputs = run_fix(config, args.status, args.strategy, args.top_n, args.model)
        elif args.command == "evaluate":
            outputs, result = run_evaluate(config, args.status, args.strategy, args.model)
            print_table(console, "Exact-match rank metrics", *metrics_rows(result.reports))
            print_table(console, "Top-10 coverage", *coverage_rows(result.coverage))
        elif args.command == "retrain-eval":
            outputs, reports = run_retrain_eval(config, args.mode, args.strategy)
            print_table(console, f"Graph completion ({args.mode} world, filtered)", *metrics_rows(reports))
        else:
            outputs, summary = run_exploits(config, args.strategy, args.model)
            header = ["status", "exploited", "remapped after exploit", "correctly predicted"]
            rows = [
                [status, s["exploited"], s["remapped_after_exploit"], s["correctly_predicted"]]
                for status, s in summary.items()
            ]
            print_table(console, "Exploited CVEs with invalid mappings", header, rows)

    for path in outputs:
        console.print(f"[bold green]Wrote: [/bold green][cyan]{path}[/cyan]")


def main(argv: list[str] | None = None) -> int:
    """Entry point of the ``cwe-remap`` console script."""
    args = build_parser().parse_args(argv)
    console = Console()
    err_console = Console(stderr=True)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    configure_logging(level, err_console)

    try:
        run(args, console)
    except CweRemapError as e:
        err_console.print(f"[bold red]Error: {e.message}[/bold red]")
        sys.stderr.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
