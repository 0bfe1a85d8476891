"""Metrics CSV handling, aggregation, plot-data files, and rendered figures.

The serve command emits one versioned CSV with a row per completed request;
the report path re-aggregates it into whitespace-delimited columns (one file
per metric, rows ordered by arrival rate) that gnuplot can consume directly,
renders matching PNG figures, and prints a text summary.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import SchemaError
from .sim import RunMetrics, aggregate

__all__ = [
    "METRICS_HEADER",
    "METRICS_COLUMNS",
    "NoDataError",
    "write_metrics_csv",
    "read_metrics_csv",
    "summarize_by_rate",
    "write_plot_data",
    "render_rate_figures",
    "render_frontier_figure",
    "render_timeline_figure",
    "summary_text",
    "write_summary_json",
]

METRICS_VERSION = 1
METRICS_HEADER = f"# crosskv-metrics v{METRICS_VERSION}"
METRICS_COLUMNS = (
    "rate",
    "request_id",
    "arrival",
    "ttft",
    "mean_tbt",
    "e2e",
    "config_k",
    "replica",
    "slo_flag",
)
REPORT_HEADER = "# crosskv-report v1"


class NoDataError(ValueError):
    """The metrics file parsed but held no data rows."""


def write_metrics_csv(path: str | Path, runs: Sequence[tuple[float, RunMetrics]]) -> None:
    lines = [METRICS_HEADER, ",".join(METRICS_COLUMNS)]
    for rate, metrics in runs:
        for r in metrics.requests:
            lines.append(
                f"{rate!r},{r.request_id},{r.arrival!r},{r.ttft!r},"
                f"{r.mean_tbt!r},{r.e2e!r},{r.config_k},{r.replica},{int(r.slo_flagged)}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> list[dict]:
    spath = str(path)
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise SchemaError(spath, "<file>", f"unreadable metrics: {exc}") from exc
    if not lines or not lines[0].startswith("# crosskv-metrics v"):
        raise SchemaError(spath, "header", "missing metrics header line")
    if lines[0] != METRICS_HEADER:
        raise SchemaError(spath, "header", f"unsupported version line {lines[0]!r}")
    if len(lines) < 2 or tuple(lines[1].split(",")) != METRICS_COLUMNS:
        raise SchemaError(spath, "columns", f"expected columns {','.join(METRICS_COLUMNS)}")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(METRICS_COLUMNS):
            raise SchemaError(spath, f"line {lineno}", f"expected {len(METRICS_COLUMNS)} fields")
        try:
            rows.append(
                {
                    "rate": float(parts[0]),
                    "request_id": parts[1],
                    "arrival": float(parts[2]),
                    "ttft": float(parts[3]),
                    "mean_tbt": float(parts[4]),
                    "e2e": float(parts[5]),
                    "config_k": int(parts[6]),
                    "replica": int(parts[7]),
                    "slo_flag": bool(int(parts[8])),
                }
            )
        except ValueError as exc:
            raise SchemaError(spath, f"line {lineno}", str(exc)) from exc
    return rows


def summarize_by_rate(rows: Sequence[dict]) -> list[dict]:
    """Per-rate mean/median/p90 of TTFT, TBT, and E2E, ordered by rate."""
    if not rows:
        raise NoDataError("no data rows in metrics file")
    out = []
    for rate in sorted({r["rate"] for r in rows}):
        group = [r for r in rows if r["rate"] == rate]
        out.append(
            {
                "rate": rate,
                "requests": len(group),
                "ttft": aggregate([r["ttft"] for r in group]),
                "tbt": aggregate([r["mean_tbt"] for r in group]),
                "e2e": aggregate([r["e2e"] for r in group]),
            }
        )
    return out


def write_plot_data(out_dir: str | Path, summary: Sequence[dict]) -> list[Path]:
    """One whitespace-delimited file per metric: rate mean median p90."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in ("ttft", "tbt", "e2e"):
        lines = [REPORT_HEADER, "# rate mean median p90"]
        for row in summary:
            agg = row[metric]
            lines.append(f"{row['rate']!r} {agg['mean']!r} {agg['median']!r} {agg['p90']!r}")
        path = root / f"{metric}_vs_rate.dat"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def render_rate_figures(out_dir: str | Path, summary: Sequence[dict]) -> list[Path]:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rates = [row["rate"] for row in summary]
    written = []
    for metric, label in (("ttft", "TTFT"), ("tbt", "TBT"), ("e2e", "E2E")):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for stat, style in (("mean", "o-"), ("median", "s--"), ("p90", "^:")):
            ax.plot(rates, [row[metric][stat] for row in summary], style, label=stat)
        ax.set_xlabel("arrival rate")
        ax.set_ylabel(f"{label} (time units)")
        ax.grid(alpha=0.3)
        ax.legend()
        path = root / f"{metric}_vs_rate.png"
        _save(fig, path)
        written.append(path)
    return written


def render_frontier_figure(out_dir: str | Path, points, frontier) -> Path:
    """Scatter of every profiled config plus the frontier staircase."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.scatter([p.k for p in points], [p.quality for p in points],
               s=18, alpha=0.6, label="profiled configs")
    ax.step([e.k for e in frontier.entries], [e.quality for e in frontier.entries],
            where="post", color="C3", label="frontier")
    ax.set_xlabel("recomputed layers")
    ax.set_ylabel("agreement")
    ax.set_ylim(-0.02, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    path = root / "profile.png"
    _save(fig, path)
    return path


def render_timeline_figure(out_dir: str | Path, timeline, title: str) -> Path:
    """Gantt-style view of one plan: a lane per resource."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lanes = sorted({ev.resource for ev in timeline.events})
    request_ids = sorted({ev.request for ev in timeline.events})
    colors = {rid: f"C{i % 10}" for i, rid in enumerate(request_ids)}
    fig, ax = plt.subplots(figsize=(7, 0.7 + 0.6 * len(lanes)))
    for y, lane in enumerate(lanes):
        for ev in timeline.events:
            if ev.resource != lane or ev.end <= ev.start:
                continue
            ax.barh(y, ev.end - ev.start, left=ev.start, height=0.55,
                    color=colors[ev.request], edgecolor="black", linewidth=0.4)
    ax.set_yticks(range(len(lanes)), lanes)
    ax.set_xlabel("time units")
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[r]) for r in request_ids]
    ax.legend(handles, request_ids, loc="upper right", fontsize=8)
    path = root / "timeline.png"
    _save(fig, path)
    return path


def summary_text(summary: Sequence[dict]) -> str:
    lines = ["rate  requests  ttft(mean/median/p90)  tbt(mean)  e2e(mean/p90)"]
    for row in summary:
        t, b, e = row["ttft"], row["tbt"], row["e2e"]
        lines.append(
            f"{row['rate']:<6g}{row['requests']:<10d}"
            f"{t['mean']:.3f}/{t['median']:.3f}/{t['p90']:.3f}"
            f"  {b['mean']:.4f}  {e['mean']:.3f}/{e['p90']:.3f}"
        )
    return "\n".join(lines)


def write_summary_json(path: str | Path, summary: Sequence[dict], slo: float,
                       sustained_rate: float | None, violation_by_rate: dict) -> None:
    doc = {
        "version": METRICS_VERSION,
        "slo": slo,
        "sustained_rate": sustained_rate,
        "per_rate": [
            {**row, "violation_rate": violation_by_rate.get(row["rate"])}
            for row in summary
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
