"""
Main entry point for udslab: sweeps, tables, plot data and acceptance suites.

    python run.py run --config config.yaml [--seeds N] [--out DIR] [--parallel K]
    python run.py table --records results/records.csv --group-by composition --metric j_true
    python run.py plotdata --records results/records.csv --x unlabeled_size --series strategy
    python run.py verify --suite theorem1
"""

import argparse
import os
import sys
import warnings

import pyfiglet
from dotenv import load_dotenv
from rich.table import Table

from src.acceptance import SUITES, load_acceptance_config, run_suite
from src.harness import emit_plotdata, emit_table, load_config, load_records, run_and_write
from src.helpers.console import console, set_quiet
from src.helpers.errors import CoverageWarning

# Lenient-coverage fallbacks are expected on small datasets; the records carry n_uncovered
warnings.filterwarnings("ignore", category=CoverageWarning)

# Get the current directory
current_dir = os.path.dirname(os.path.abspath(__file__))


def banner():
    console.print()
    console.print(pyfiglet.figlet_format("udslab"), style="bold cyan")
    console.print(
        "udslab runs tabular offline RL experiments on sharing unlabeled data.",
        style="bold",
    )
    console.print(
        "It compares No Sharing, UDS, CDS, CDS+UDS, reward prediction and optimal reweighting,\n"
        "and evaluates the reward-bias and sampling-error bounds exactly.\n"
    )


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Tabular offline RL with unlabeled data sharing.")
    parser.add_argument("--quiet", action="store_true", help="no banner, status lines or progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a sweep from a config file")
    run.add_argument("--config", default=os.path.join(current_dir, "config.yaml"))
    run.add_argument("--seeds", type=int, help="override: use seeds 0..N-1")
    run.add_argument("--out", help="override: output directory")
    run.add_argument("--parallel", type=int, help="override: worker processes")

    table = commands.add_parser("table", help="mean ± 95%% CI table from records.csv")
    table.add_argument("--records", required=True)
    table.add_argument("--group-by", default="composition")
    table.add_argument("--metric", default="j_true")
    table.add_argument("--columns", default="strategy")
    table.add_argument("--out", help="write <out>.md and <out>.csv")

    plot = commands.add_parser("plotdata", help="long-format plot data from records.csv")
    plot.add_argument("--records", required=True)
    plot.add_argument("--x", required=True)
    plot.add_argument("--series", default="strategy")
    plot.add_argument("--metric", default="j_true")
    plot.add_argument("--out", help="CSV path (default: stdout)")

    verify = commands.add_parser("verify", help="run acceptance suites")
    verify.add_argument("--suite", choices=SUITES + ("all",), default="all")
    verify.add_argument("--config", default=os.path.join(current_dir, "acceptance_config.yaml"))
    return parser.parse_args(argv)


def command_run(args):
    config = load_config(args.config)
    if args.seeds is not None:
        config.seeds = list(range(args.seeds))
    if args.out:
        config.output_dir = args.out
    if args.parallel is not None:
        config.parallel = args.parallel

    records, written = run_and_write(config)
    console.print(
        f"\nAll done! {len(records)} records written to {written['records']}",
        style="bold green",
    )
    return 0


def command_table(args):
    result = emit_table(load_records(args.records), args.group_by, args.metric, args.columns)
    if args.out:
        result.write(args.out)
        console.print(f"Wrote {args.out}.md and {args.out}.csv", style="bold green")
    else:
        sys.stdout.write(result.markdown + "\n")
    return 0


def command_plotdata(args):
    frame = emit_plotdata(load_records(args.records), args.x, args.series, args.metric)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        frame.to_csv(args.out, index=False)
        console.print(f"Wrote {args.out}", style="bold green")
    else:
        sys.stdout.write(frame.to_csv(index=False))
    return 0


def command_verify(args):
    params = load_acceptance_config(args.config)
    suites = SUITES if args.suite == "all" else (args.suite,)
    results = []
    for i, suite in enumerate(suites, start=1):
        console.print(f"\nStep {i}: Running the {suite} suite... ({i}/{len(suites)})", style="bold")
        results.extend(run_suite(suite, params))

    table = Table(title="Acceptance")
    for column in ("suite", "check", "observed", "required", "result", "detail"):
        table.add_column(column)
    for r in results:
        verdict = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.suite, r.name, f"{r.observed:.6g}", r.required, verdict, r.detail)
    console.print(table)

    failed = sum(not r.passed for r in results)
    if failed:
        console.print(f"\n{failed} of {len(results)} checks failed.", style="bold red")
        return 1
    console.print(f"\nAll {len(results)} checks passed!", style="bold green")
    return 0


COMMANDS = {"run": command_run, "table": command_table, "plotdata": command_plotdata, "verify": command_verify}


def main(argv=None):
    """Main function to run udslab."""
    load_dotenv()
    args = parse_args(argv)
    set_quiet(args.quiet)
    if not args.quiet and args.command in ("run", "verify"):
        banner()

    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        console.print(f"\nError: {e}", style="bold red")
        return 2


if __name__ == "__main__":
    sys.exit(main())
