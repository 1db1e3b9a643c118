"""Run reports: a pure function of the trace bytes.

``build_report`` never looks at simulator state, so running a scenario and
re-checking its saved trace give byte-identical reports.
"""

from __future__ import annotations

import json
from collections import Counter

from .checker import TraceView, CHECKS
from .trace import Trace

REPORT_FORMAT = "fastbft-report/1"


def build_report(trace: Trace) -> dict:
    tv = TraceView(trace)
    verdicts = {name: fn(tv) for name, fn in CHECKS.items()}
    lat = verdicts["latency"].data
    ticks = [b["ticks"] for b in lat["blocks"]]
    views = Counter()
    for _, r in tv.honest_records("view-enter"):
        views[r["r"]] += 1
    msgs = Counter(rec["msg"]["type"] for _, rec, _ in tv.sends)
    heights = verdicts["safety"].data["committed_heights"]
    end = trace.records[-1]
    return {
        "format": REPORT_FORMAT,
        "trace_digest": trace.digest(),
        "scenario": trace.header["scenario"],
        "completed": end["reason"],
        "end_time": end["t"],
        "ok": all(v.passed for v in verdicts.values()),
        "latency": {
            "delta": tv.delta,
            "blocks": lat["blocks"],
            "exempt": lat["exempt"],
            "max_ticks": max(ticks, default=None),
            "max_deltas": max(ticks, default=0) / tv.delta if ticks else None,
            "max_rounds": max(ticks, default=0) / tv.delta if ticks else None,
        },
        # view 1 is entered at start-up, so every further entry is a view change
        "view_changes": max((c - 1 for c in views.values()), default=0),
        "view_changes_by_replica": {str(r): views[r] - 1 for r in sorted(views)},
        "messages": dict(sorted(msgs.items())),
        "committed_heights": heights,
        "verdicts": {name: v.to_dict() for name, v in verdicts.items()},
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def commit_series(trace: Trace) -> dict:
    """replica -> [(time, height)] for honest commits, for plotting."""
    honest = set(trace.header["honest"])
    out = {}
    for r in trace.records:
        if r["ev"] == "commit" and r["r"] in honest and not r.get("conflict"):
            out.setdefault(r["r"], []).append((r["t"], r["h"]))
    return out
