"""``sim`` command line: run, compare and validate scenarios.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cm.coordination import InfeasibleSchedule
from .harness import ScenarioError, ShapeMismatch, compare, dumps, load, load_report, run
from .harness.report import find_histograms, histogram_csv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="Cluster-manager policy simulations.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log operator alerts")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario and write its JSON report")
    r.add_argument("--scenario", required=True,
                   help="scenario file, or the name of a bundled scenario")
    r.add_argument("--out", required=True, help="report path")
    r.add_argument("--seed", type=int, help="override the scenario's seed")
    r.add_argument("--csv", help="also write every latency histogram as CSV here")

    c = sub.add_parser("compare", help="percentage deltas of report A against baseline B")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--metric", required=True, help="e.g. latency_ms, latency_us, span_decades")

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("--scenario", required=True)
    return ap


def _run(args) -> int:
    sc = load(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    report = run(sc)
    Path(args.out).write_text(dumps(report), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(histogram_csv(find_histograms(report["results"])),
                                  encoding="utf-8")
    print(f"{sc.name}: report written to {args.out}")
    return EXIT_OK


def _compare(args) -> int:
    try:
        a, b = load_report(args.a), load_report(args.b)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError("report", str(exc)) from None
    print(json.dumps(compare(a, b, args.metric), indent=2, sort_keys=True))
    return EXIT_OK


def _validate(args) -> int:
    sc = load(args.scenario)
    print(f"{sc.name}: ok ({sc.kind}, {sc.node_count} nodes, seed {sc.seed})")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "compare": _compare, "validate": _validate}[args.cmd]
    try:
        return handler(args)
    except (ScenarioError, ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleSchedule as exc:
        print(f"error: infeasible schedule: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI reports every runtime failure the same way
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
