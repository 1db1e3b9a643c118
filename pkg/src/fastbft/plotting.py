"""Report figures (matplotlib, headless)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import commit_series  # noqa: E402


def render_report_figure(trace, report: dict, path) -> None:
    """Committed height over time per honest replica, next to a latency histogram."""
    delta = report["latency"]["delta"]
    gst = report["scenario"]["gst"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for rid, pts in sorted(commit_series(trace).items()):
        ts = [0] + [t / delta for t, _ in pts]
        hs = [0] + [h for _, h in pts]
        ax1.step(ts, hs, where="post", label=f"replica {rid}")
    if gst:
        ax1.axvline(gst / delta, color="grey", linestyle="--", linewidth=1, label="GST")
    ax1.set_xlabel("time (delta)")
    ax1.set_ylabel("committed height")
    ax1.legend(fontsize=7)
    lats = [b["deltas"] for b in report["latency"]["blocks"]]
    if lats:
        ax2.hist(lats, bins=sorted(set(lats)) + [max(lats) + 0.5] if len(set(lats)) > 1 else 5)
    ax2.set_xlabel("proposal to QC latency (delta)")
    ax2.set_ylabel("blocks")
    ax2.set_title(f"view changes: {report['view_changes']}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
