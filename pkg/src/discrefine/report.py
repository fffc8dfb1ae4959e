"""Per-fold and cross-fold tables in the Dice / HD95(mm) layout, plus relative
improvement lines against the Baseline arm."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
import yaml

from .harness import read_scores
from .metrics import REPORT_REGIONS, aggregate

COLS = [*REPORT_REGIONS, "Avg"]


def _find_runs(paths):
    """Accept run roots or individual ``<arm>/fold<k>`` directories."""
    found = []
    for p in map(Path, paths):
        if (p / "scores.csv").exists():
            found.append(p)
        else:
            found.extend(sorted(s.parent for s in p.glob("*/fold*/scores.csv")))
    return found


def _conventions(run):
    snap = run / "config.snapshot"
    if not snap.exists():
        return None
    return yaml.safe_load(snap.read_text()).get("metrics")


def collect(paths):
    runs = _find_runs(paths)
    if not runs:
        raise ValueError("no completed runs found")
    conv = None
    rows = []
    for run in runs:
        c = _conventions(run)
        if conv is None:
            conv = c
        elif c is not None and c != conv:
            raise ValueError(f"{run} uses metric conventions {c}, expected {conv}")
        summary = aggregate(read_scores(run / "scores.csv"))
        fold = int(run.name.removeprefix("fold"))
        rows.append({"fold": fold, "arm": run.parent.name, **summary})
    rows.sort(key=lambda r: (r["fold"], r["arm"] != "Baseline", r["arm"]))
    return rows, conv


def relative_change(base, new, higher_is_better):
    return (new - base) / base if higher_is_better else (base - new) / base


def improvements(rows, arm, baseline="Baseline"):
    """Improvement of ``arm`` over ``baseline`` on the Avg columns.

    ``relative_of_means`` compares the fold-averaged means;
    ``mean_of_relatives`` averages the per-fold relative changes.
    """
    base = {r["fold"]: r for r in rows if r["arm"] == baseline}
    new = {r["fold"]: r for r in rows if r["arm"] == arm}
    folds = sorted(set(base) & set(new))
    if not folds:
        return None
    out = {"folds": folds}
    for metric, better in (("dice", True), ("hd95", False)):
        b = np.array([base[f][metric]["Avg"] for f in folds])
        n = np.array([new[f][metric]["Avg"] for f in folds])
        out[metric] = {
            "relative_of_means": relative_change(b.mean(), n.mean(), better),
            "mean_of_relatives": float(np.mean([relative_change(x, y, better) for x, y in zip(b, n)])),
        }
    return out


def _fmt_row(r):
    return [f"{100 * r['dice'][c]:.2f}%" for c in COLS] + [f"{r['hd95'][c]:.2f}" for c in COLS]


def _cross_fold(rows):
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    out = []
    for arm in arms:
        sel = [r for r in rows if r["arm"] == arm]
        out.append(
            {
                "arm": arm,
                "n_folds": len(sel),
                "dice": {c: float(np.mean([r["dice"][c] for r in sel])) for c in COLS},
                "hd95": {c: float(np.nanmean([r["hd95"][c] for r in sel])) for c in COLS},
                "excluded_count": sum(r["excluded_count"] for r in sel),
            }
        )
    return out


def improvement_lines(rows):
    lines = []
    for arm in dict.fromkeys(r["arm"] for r in rows):
        if arm == "Baseline":
            continue
        imp = improvements(rows, arm)
        if imp is None:
            continue
        d, h = imp["dice"], imp["hd95"]
        lines.append(
            f"{arm} vs Baseline: average improvement of {100 * d['relative_of_means']:.2f}% in the Dice score "
            f"and {100 * h['relative_of_means']:.2f}% in HD95 (relative change of fold-averaged means; "
            f"mean of per-fold relative changes: Dice {100 * d['mean_of_relatives']:.2f}%, HD95 {100 * h['mean_of_relatives']:.2f}%)"
        )
    return lines


def render_markdown(rows, conv=None):
    head = "| Fold # | Model | " + " | ".join(f"Dice {c}" for c in COLS) + " | " + " | ".join(f"HD95(mm) {c}" for c in COLS) + " |"
    sep = "|" + "---|" * (2 + 2 * len(COLS))
    lines = ["## Per-fold results", "", head, sep]
    for r in rows:
        lines.append(f"| fold{r['fold'] + 1} | {r['arm']} | " + " | ".join(_fmt_row(r)) + " |")
    lines += ["", "## Cross-fold summary", "", head.replace("Fold # | ", "Folds | "), sep]
    for s in _cross_fold(rows):
        lines.append(f"| {s['n_folds']} | {s['arm']} | " + " | ".join(_fmt_row(s)) + " |")
    excluded = sum(r["excluded_count"] for r in rows)
    lines += ["", f"HD95 sentinel values excluded from means: {excluded}"]
    if conv:
        lines.append("Metric conventions: " + ", ".join(f"{k}={v}" for k, v in sorted(conv.items())))
    imp = improvement_lines(rows)
    if imp:
        lines += ["", "## Improvement over Baseline", ""] + [f"- {x}" for x in imp]
    return "\n".join(lines) + "\n"


def render_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "arm"] + [f"dice_{c}" for c in COLS] + [f"hd95_{c}" for c in COLS] + ["hd95_excluded"])
    for r in rows:
        w.writerow([r["fold"] + 1, r["arm"]] + [repr(r["dice"][c]) for c in COLS] + [repr(r["hd95"][c]) for c in COLS] + [r["excluded_count"]])
    for s in _cross_fold(rows):
        w.writerow(["all", s["arm"]] + [repr(s["dice"][c]) for c in COLS] + [repr(s["hd95"][c]) for c in COLS] + [s["excluded_count"]])
    return buf.getvalue()


def report(run_dirs, fmt="md"):
    rows, conv = collect(run_dirs)
    if fmt == "md":
        return render_markdown(rows, conv)
    if fmt == "csv":
        return render_csv(rows)
    raise ValueError(f"unknown format {fmt!r}")
