"""Record streams, summary tables, and static plots.

Per-frame records are append-only newline-delimited JSON.  Summaries
are domain-by-round pivot tables (one block per metric) with a global
"Mean" column that is the frame-weighted mean over the round, emitted
as CSV and/or versioned JSON.  Every number in a table is recomputed
from the raw record stream on each call; nothing is cached.
"""

from __future__ import annotations

import csv
import io
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

SCHEMA_VERSION = 1

# Frozen column order for records and CSV emission.
RECORD_FIELDS = (
    "frame_index",
    "domain",
    "round_index",
    "epe",
    "d1_all",
    "epe_valid",
    "d1_valid",
    "epe_invalid",
    "d1_invalid",
    "proxy_density",
    "loss_total",
    "loss_proxy",
    "loss_teacher",
    "wall_time_ms",
)

SUMMARY_METRICS = (
    "epe",
    "d1_all",
    "epe_valid",
    "d1_valid",
    "epe_invalid",
    "d1_invalid",
    "proxy_density",
)


def write_records(path, records, append=False) -> None:
    """Write records as NDJSON, one object per line."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


def summarize(records) -> list[dict]:
    """Per-(domain, round) means of every summary metric, in stream order."""
    if not records:
        raise ValueError("no records to summarize")
    groups: dict[tuple, list[dict]] = {}
    order = []
    for rec in records:
        key = (rec["round_index"], rec["domain"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    rows = []
    for round_index, domain in order:
        recs = groups[(round_index, domain)]
        row = {"domain": domain, "round_index": round_index, "frames": len(recs)}
        for metric in SUMMARY_METRICS:
            row[metric] = _mean_or_none(r[metric] for r in recs)
        rows.append(row)
    return rows


def pivot_table(records, metric) -> dict:
    """Domain-by-round table of one metric plus the frame-weighted Mean.

    The Mean cell of a round averages the metric over every record of
    that round (all domains pooled), which weights each domain by its
    frame count.
    """
    if not records:
        raise ValueError("no records to tabulate")
    if metric not in SUMMARY_METRICS:
        raise ValueError(f"unknown summary metric {metric!r}")
    domains = []
    for rec in records:
        if rec["domain"] not in domains:
            domains.append(rec["domain"])
    rounds = sorted({rec["round_index"] for rec in records})
    cells = {}
    means = {}
    for rnd in rounds:
        round_recs = [r for r in records if r["round_index"] == rnd]
        for dom in domains:
            cells[(rnd, dom)] = _mean_or_none(
                r[metric] for r in round_recs if r["domain"] == dom)
        means[rnd] = _mean_or_none(r[metric] for r in round_recs)
    return {"metric": metric, "domains": domains, "rounds": rounds,
            "cells": cells, "mean": means}


def _table_rows(table):
    header = ["metric", "round"] + list(table["domains"]) + ["Mean"]
    rows = []
    for rnd in table["rounds"]:
        row = [table["metric"], rnd]
        row += [table["cells"][(rnd, dom)] for dom in table["domains"]]
        row.append(table["mean"][rnd])
        rows.append(row)
    return header, rows


def summary_csv(records, metrics=SUMMARY_METRICS) -> str:
    """All pivot tables stacked into one CSV string."""
    tables = [pivot_table(records, m) for m in metrics]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header, _ = _table_rows(tables[0])
    writer.writerow(header)
    for table in tables:
        _, rows = _table_rows(table)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def summary_json(records, metrics=SUMMARY_METRICS) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "tables": []}
    for m in metrics:
        table = pivot_table(records, m)
        doc["tables"].append({
            "metric": m,
            "domains": table["domains"],
            "rounds": table["rounds"],
            "rows": [
                {
                    "round": rnd,
                    "cells": {dom: table["cells"][(rnd, dom)]
                              for dom in table["domains"]},
                    "mean": table["mean"][rnd],
                }
                for rnd in table["rounds"]
            ],
        })
    return json.dumps(doc, indent=2, sort_keys=True)


def format_table(table) -> str:
    """Fixed-width text rendering of one pivot table (for the console)."""
    header, rows = _table_rows(table)
    text_rows = [header]
    for row in rows:
        text_rows.append([
            f"{v:.4f}" if isinstance(v, float) else ("" if v is None else str(v))
            for v in row
        ])
    widths = [max(len(str(r[i])) for r in text_rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(text_rows):
        lines.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_curves(records, out_path, metric="d1") -> str:
    """Per-frame curves of a metric for the all/valid/invalid regions.

    One static PNG: raw per-frame traces plus round boundaries.  Output
    bytes depend only on the records and the renderer version.
    """
    if not records:
        raise ValueError("no records to plot")
    if metric == "d1":
        columns = [("d1_all", "all"), ("d1_valid", "valid"), ("d1_invalid", "invalid")]
        ylabel = "D1 outlier rate"
    elif metric == "epe":
        columns = [("epe", "all"), ("epe_valid", "valid"), ("epe_invalid", "invalid")]
        ylabel = "end-point error [px]"
    else:
        raise ValueError(f"metric must be 'd1' or 'epe', got {metric!r}")

    xs = list(range(len(records)))
    fig, ax = plt.subplots(figsize=(8, 3.2), dpi=110)
    for column, label in columns:
        ys = [rec[column] for rec in records]
        pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    linewidth=0.9, label=label)
    boundaries = [
        x for x in range(1, len(records))
        if records[x]["round_index"] != records[x - 1]["round_index"]
    ]
    for x in boundaries:
        ax.axvline(x, color="gray", linewidth=0.6, linestyle=":")
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return str(out_path)


def emit_summary(records, out_dir, *, formats=("csv", "json"), plots=False,
                 metrics=SUMMARY_METRICS) -> dict:
    """Write summary tables (and optionally region curves) to ``out_dir``.

    Returns {kind: path} for everything written.  Empty records are an
    error: there is nothing to summarize.
    """
    if not records:
        raise ValueError("no records to summarize")
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    if "csv" in formats:
        path = os.path.join(out_dir, "summary.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(summary_csv(records, metrics))
        written["csv"] = path
    if "json" in formats:
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(summary_json(records, metrics))
        written["json"] = path
    if plots:
        for metric in ("epe", "d1"):
            path = os.path.join(out_dir, f"curves_{metric}.png")
            written[f"plot_{metric}"] = render_curves(records, path, metric)
    return written
