"""Command line entry point: ``fastbft run | fuzz | check``.

Exit status is 0 when every checker passes, 1 when a checker fails and 2
for unusable input (bad scenario, unreadable or incomplete trace).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .certs import MUTATIONS
from .fuzz import Template, campaign
from .report import build_report, dumps
from .simnet import DELTA_ENV, HORIZON_ENV, ScenarioError, load_scenario, run
from .trace import Trace, TraceError

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _figure_path(report_out: str) -> Path:
    return Path(report_out).with_suffix(".png")


def _emit(report: dict, trace: Trace, args) -> int:
    text = dumps(report)
    if args.report_out:
        Path(args.report_out).write_text(text)
        if not args.no_figure:
            from .plotting import render_report_figure
            render_report_figure(trace, report, _figure_path(args.report_out))
    if not args.quiet:
        sys.stdout.write(text)
    failed = [k for k, v in report["verdicts"].items() if not v["pass"]]
    if failed:
        print(f"FAIL: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario, seed=args.seed)
        if args.mutation:
            sc.mutation = args.mutation
            sc.validate()
    except (ScenarioError, OSError) as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    data = run(sc).to_bytes()
    if args.trace_out:
        Path(args.trace_out).write_bytes(data)
    # the report is computed from the serialized trace, exactly as `check` would
    trace = Trace.from_bytes(data)
    return _emit(build_report(trace), trace, args)


def cmd_check(args) -> int:
    try:
        trace = Trace.load(args.trace)
    except (TraceError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {args.trace}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return _emit(build_report(trace), trace, args)


def cmd_fuzz(args) -> int:
    try:
        template = Template.load(args.template)
        if args.runs > 0:
            template.draw(args.seed_base, args.mutation)  # surface template errors up front
    except (ScenarioError, OSError) as exc:
        print(f"error: {args.template}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    workers = args.workers or os.cpu_count() or 1
    summary = campaign(template, args.runs, args.seed_base, args.mutation, workers,
                       stop_on_failure=args.stop_on_failure)
    out = summary.to_dict()
    out["seed_base"] = args.seed_base
    out["mutation"] = args.mutation
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.report_out:
        Path(args.report_out).write_text(text)
    if not args.quiet:
        sys.stdout.write(text)
    if summary.first_failing_seed is not None:
        print(f"first failing seed: {summary.first_failing_seed} "
              f"(replay: fastbft run <scenario> --seed {summary.first_failing_seed})",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fastbft",
        description="Simulate and check a 2-round BFT SMR protocol.",
        epilog=f"Environment: {DELTA_ENV} sets the default delta (ticks), "
               f"{HORIZON_ENV} the default horizon in deltas.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--report-out", help="write the JSON report here (and a .png figure next to it)")
        p.add_argument("--no-figure", action="store_true", help="skip the figure")
        p.add_argument("-q", "--quiet", action="store_true", help="do not print the report")

    p = sub.add_parser("run", help="run one scenario and check the trace")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--trace-out", help="write the trace here")
    p.add_argument("--mutation", choices=MUTATIONS, help="run a deliberately broken protocol variant")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("check", help="re-check a saved trace")
    p.add_argument("trace")
    common(p)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("fuzz", help="seeded runs drawn from a scenario template")
    p.add_argument("template")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--mutation", choices=MUTATIONS)
    p.add_argument("--workers", type=int, default=0, help="worker processes (default: CPU count)")
    p.add_argument("--stop-on-failure", action="store_true")
    p.add_argument("--report-out", help="write the JSON summary here")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(fn=cmd_fuzz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "runs", 0) < 0:
        print("error: --runs must be >= 0", file=sys.stderr)
        return EXIT_INPUT
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
