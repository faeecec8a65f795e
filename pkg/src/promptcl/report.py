"""Report files: per-run CSV projection, multi-run aggregation, SVG task-wise curves."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .continual import REPORT_SCHEMA_VERSION, RunReport
from .metrics import paired_t_test

RUN_CSV_FIELDS = ["config_hash", "seed", "order_id", "variant", "boundary", "task_id", "accuracy"]


class SchemaError(ValueError):
    """Report files disagree with the supported schema version."""


def write_run(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_run_csv(report, out / "summary.csv")
    write_svg({report.variant: report.taskwise}, out / "curves.svg", title=f"{report.order_id} seed {report.seed}")
    return out


def run_rows(report: RunReport) -> list[dict]:
    """One row per entry of the lower-triangular accuracy matrix (1-based boundary)."""
    rows = []
    for k, row in enumerate(report.acc):
        for j, value in enumerate(row):
            rows.append({"config_hash": report.config_hash, "seed": report.seed, "order_id": report.order_id,
                         "variant": report.variant, "boundary": k + 1, "task_id": report.task_ids[j],
                         "accuracy": value})
    return rows


def write_run_csv(report: RunReport, path) -> None:
    # repr round-trips floats exactly
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_CSV_FIELDS)
        w.writeheader()
        for r in run_rows(report):
            w.writerow({**r, "accuracy": repr(float(r["accuracy"]))})


def read_run_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{**r, "seed": int(r["seed"]), "boundary": int(r["boundary"]), "accuracy": float(r["accuracy"])}
                for r in csv.DictReader(fh)]


def load_reports(in_dir) -> list[RunReport]:
    paths = sorted(Path(in_dir).rglob("report.json"))
    if not paths:
        raise FileNotFoundError(f"no report.json files under {in_dir}")
    reports = []
    for p in paths:
        d = json.loads(p.read_text(encoding="utf-8"))
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise SchemaError(f"{p}: schema_version {d.get('schema_version')!r}, "
                              f"supported {REPORT_SCHEMA_VERSION}")
        reports.append(RunReport.from_dict(d))
    return reports


def aggregate(reports: list[RunReport]) -> dict:
    """Group by (config hash, order); mean over seeds; paired t-tests between groups on an order."""
    groups: dict[tuple[str, str], list[RunReport]] = defaultdict(list)
    for r in reports:
        groups[(r.config_hash, r.order_id)].append(r)
    out_groups = []
    for (chash, order), reps in sorted(groups.items()):
        reps = sorted(reps, key=lambda r: r.seed)
        curves = np.array([r.taskwise for r in reps])
        out_groups.append({
            "config_hash": chash,
            "order_id": order,
            "variant": reps[0].variant,
            "n_runs": len(reps),
            "seeds": [r.seed for r in reps],
            "final_average": [r.final_average for r in reps],
            "mean_final_average": float(np.mean([r.final_average for r in reps])),
            "mean_taskwise": curves.mean(axis=0).tolist(),
            "mean_forgetting": float(np.mean([np.mean(r.forgetting) for r in reps])),
        })
    tests = []
    for i, a in enumerate(out_groups):
        for b in out_groups[i + 1:]:
            if a["order_id"] != b["order_id"]:
                continue
            fa = dict(zip(a["seeds"], a["final_average"]))
            fb = dict(zip(b["seeds"], b["final_average"]))
            common = sorted(set(fa) & set(fb))
            if len(common) < 2:
                continue
            res = paired_t_test([fa[s] for s in common], [fb[s] for s in common])
            tests.append({"order_id": a["order_id"], "a": a["variant"], "b": b["variant"],
                          "a_hash": a["config_hash"], "b_hash": b["config_hash"], "n": len(common),
                          **asdict(res)})
    return {"schema_version": REPORT_SCHEMA_VERSION, "groups": out_groups, "ttests": tests}


def write_aggregate(agg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        # forgetting is a diagnostic, not one of the headline metrics
        w.writerow(["config_hash", "order_id", "variant", "n_runs", "mean_final_average",
                    "mean_forgetting_diagnostic"])
        for g in agg["groups"]:
            w.writerow([g["config_hash"], g["order_id"], g["variant"], g["n_runs"],
                        repr(g["mean_final_average"]), repr(g["mean_forgetting"])])
    with open(out / "ttests.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["order_id", "a", "b", "n", "t", "df", "significant", "mean_diff"])
        for t in agg["ttests"]:
            w.writerow([t["order_id"], t["a"], t["b"], t["n"], repr(t["t"]), t["df"], t["significant"],
                        repr(t["mean_diff"])])
    curves = {f"{g['variant']} [{g['order_id']}]": g["mean_taskwise"] for g in agg["groups"]}
    write_svg(curves, out / "curves.svg", title="mean task-wise accuracy")
    return out


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def write_svg(curves: dict[str, list[float]], path, title: str = "", width: int = 560, height: int = 340) -> None:
    """Static line chart: x = tasks completed, y = accuracy in [0, 1]."""
    left, right, top, bottom = 50, 180, 30, 40
    pw, ph = width - left - right, height - top - bottom
    n = max((len(v) for v in curves.values()), default=1)

    def xy(k, v):
        x = left + (pw * (k - 1) / (n - 1) if n > 1 else pw / 2)
        return x, top + ph * (1.0 - v)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="18" font-size="13">{_esc(title)}</text>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        _, y = xy(1, tick)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="#999"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    for k in range(1, n + 1):
        x, _ = xy(k, 0.0)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">tasks completed</text>')
    for i, (name, values) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join("{:.1f},{:.1f}".format(*xy(k + 1, v)) for k, v in enumerate(values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 * i + 8
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 26}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 30}" y="{ly + 4}">{_esc(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
