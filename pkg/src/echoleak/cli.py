"""Command-line interface.

Subcommands:
  run     — execute one scenario file and report its trace
  matrix  — build the 8x6 mitigation matrix and diff it against the committed
            expected grid (exit code 2 on any cell drift)
  trace   — human-readable kill-chain narrative for a scenario
  corpus  — write the demo corpus fixtures

Exit codes: 0 success, 1 error, 2 matrix mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .corpus import CorpusError, write_demo_corpus
from .matrix import MatrixError, build_matrix, diff_against_expected
from .pipeline import Scenario, run_scenario
from .report import ReportFormatError, emit_report, trace_to_markdown

_FORMATS = ("json", "csv", "md")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoleak",
        description="Zero-click prompt-injection kill-chain sandbox and defense evaluator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a single scenario and emit its trace")
    run_p.add_argument("--scenario", required=True, help="scenario JSON file")
    run_p.add_argument("--out", help="write the report here (figure rendered alongside)")
    run_p.add_argument("--format", default="json", help="json, csv, or md")
    run_p.add_argument("--no-figures", action="store_true", help="skip the PNG figure")

    matrix_p = sub.add_parser("matrix", help="build the mitigation matrix and check it")
    matrix_p.add_argument("--out", help="write the report here (figure rendered alongside)")
    matrix_p.add_argument("--format", default="md", help="json, csv, or md")
    matrix_p.add_argument("--no-figures", action="store_true", help="skip the PNG figure")

    trace_p = sub.add_parser("trace", help="narrate a scenario's kill chain")
    trace_p.add_argument("--scenario", required=True, help="scenario JSON file")
    trace_p.add_argument(
        "--explain", action="store_true", help="human-readable narrative instead of JSON"
    )

    corpus_p = sub.add_parser("corpus", help="corpus utilities")
    corpus_sub = corpus_p.add_subparsers(dest="corpus_command", required=True)
    gen_p = corpus_sub.add_parser("gen", help="generate corpus fixtures")
    gen_p.add_argument("--demo", action="store_true", required=True, help="write the demo corpus")
    gen_p.add_argument("--dest", default=".", help="destination directory (default: cwd)")

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = Scenario.from_file(args.scenario)
    trace = run_scenario(scenario)
    content = emit_report(trace, args.format, out_path=args.out, figures=not args.no_figures)
    if args.out:
        print(f"trace written to {args.out}")
    else:
        print(content, end="")
    return 0


def _cmd_matrix(args: argparse.Namespace) -> int:
    matrix = build_matrix()
    content = emit_report(matrix, args.format, out_path=args.out, figures=not args.no_figures)
    if args.out:
        print(f"matrix written to {args.out}")
    else:
        print(content, end="")
    diffs = diff_against_expected(matrix)
    if diffs:
        for defense, step, actual, expected in diffs:
            print(
                f"MISMATCH: ({defense}, {step}) produced {actual!r}, expected {expected!r}",
                file=sys.stderr,
            )
        return 2
    print("matrix matches the committed expected grid (48/48 cells)", file=sys.stderr)
    return 0


def _cmd_trace(args: argparse.Namespace) -> int:
    scenario = Scenario.from_file(args.scenario)
    trace = run_scenario(scenario)
    if args.explain:
        print(trace_to_markdown(trace), end="")
    else:
        print(emit_report(trace, "json", out_path=None), end="")
    return 0


def _cmd_corpus(args: argparse.Namespace) -> int:
    path = write_demo_corpus(Path(args.dest))
    print(f"demo corpus written to {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "matrix":
            return _cmd_matrix(args)
        if args.command == "trace":
            return _cmd_trace(args)
        if args.command == "corpus":
            return _cmd_corpus(args)
    except (ReportFormatError, CorpusError, MatrixError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
