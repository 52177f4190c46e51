"""Report emission: CSV tables and grouped-bar charts from a run ledger.

Table layout mirrors the three result views: accuracy before/after
distillation per label fraction, percent validation gain versus fraction
and versus student size, and teacher->student compression triads.
Aggregation across seeds is the median, with min/max recorded as whiskers.
Tables are byte-deterministic for a fixed ledger.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ReportError
from .experiments import SCHEMA_VERSION, RunRecord, load_ledger


@dataclass
class ReportBundle:
    tables: dict = field(default_factory=dict)  # name -> csv path
    plots: dict = field(default_factory=dict)  # name -> svg path
    manifest: Path | None = None


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _stats(values: list[float]) -> tuple[float, float, float]:
    return float(np.median(values)), float(min(values)), float(max(values))


def _group(records: list[RunRecord], key_fn) -> dict:
    groups: dict = {}
    for rec in records:
        groups.setdefault(key_fn(rec), []).append(rec)
    return dict(sorted(groups.items()))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _stat_columns(groups: dict, fields: list[str]) -> list[list]:
    rows = []
    for key, recs in groups.items():
        row = list(key)
        for name in fields:
            med, lo, hi = _stats([getattr(r, name) for r in recs])
            row += [med, lo, hi]
        rows.append(row)
    return rows


def _bar_chart(path: Path, title: str, groups: dict, ylabel: str):
    """One grouped-bar SVG: x = fraction, one bar per model/pair."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "semidistill"
    series: dict = {}
    for (label, fraction), (med, lo, hi) in groups.items():
        series.setdefault(label, []).append((fraction, med, lo, hi))
    fractions = sorted({frac for _, frac in groups})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(series), 1)
    for i, (label, points) in enumerate(sorted(series.items())):
        xs, meds, los, his = [], [], [], []
        for frac, med, lo, hi in sorted(points):
            xs.append(fractions.index(frac) + i * width)
            meds.append(med)
            los.append(med - lo)
            his.append(hi - med)
        ax.bar(xs, meds, width=width, label=str(label), yerr=[los, his], capsize=2)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(fractions))])
    ax.set_xticklabels([f"{f:g}" for f in fractions])
    ax.set_xlabel("label fraction")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(ledger_path, out_dir) -> ReportBundle:
    """Generate all tables and charts from the ledger into out_dir."""
    records = load_ledger(ledger_path)
    if not records:
        raise ReportError(f"empty ledger: {ledger_path}")
    for rec in records:
        if rec.schema_version != SCHEMA_VERSION:
            raise ReportError(
                f"ledger schema version {rec.schema_version} != supported {SCHEMA_VERSION}"
            )
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise ReportError("ledger holds no successful cells")
    self_distill = [r for r in ok if r.cell["kind"] == "distill" and r.cell["teacher"] == r.cell["student"]]
    compression = [r for r in ok if r.cell["kind"] == "distill" and r.cell["teacher"] != r.cell["student"]]
    baselines = [r for r in ok if r.cell["kind"] == "baseline"]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle()

    # accuracy before (teacher) / after (self-distilled student) per split
    groups = _group(self_distill, lambda r: (r.cell["student"], r.cell["fraction"]))
    rows = _stat_columns(
        groups, ["teacher_val", "student_val", "overfit_gap_teacher", "overfit_gap_student"]
    )
    _write_csv(
        out / "accuracy_vs_split.csv",
        ["model", "fraction"]
        + [f"{f}_{s}" for f in ("teacher_val", "student_val", "gap_teacher", "gap_student")
           for s in ("median", "min", "max")],
        rows,
    )
    bundle.tables["accuracy_vs_split"] = out / "accuracy_vs_split.csv"
    if groups:
        chart = {
            key: _stats([r.student_val for r in recs]) for key, recs in groups.items()
        }
        _bar_chart(out / "accuracy_vs_split.svg", "Validation accuracy after self-distillation",
                   chart, "val accuracy")
        bundle.plots["accuracy_vs_split"] = out / "accuracy_vs_split.svg"

    # percent increase vs fraction and vs student parameter count
    rows = _stat_columns(groups, ["pct_increase"])
    _write_csv(
        out / "pct_increase_vs_fraction.csv",
        ["model", "fraction", "pct_increase_median", "pct_increase_min", "pct_increase_max"],
        rows,
    )
    bundle.tables["pct_increase_vs_fraction"] = out / "pct_increase_vs_fraction.csv"

    size_groups = _group(
        self_distill, lambda r: (r.student_params, r.cell["student"], r.cell["fraction"])
    )
    _write_csv(
        out / "pct_increase_vs_params.csv",
        ["student_params", "model", "fraction",
         "pct_increase_median", "pct_increase_min", "pct_increase_max"],
        _stat_columns(size_groups, ["pct_increase"]),
    )
    bundle.tables["pct_increase_vs_params"] = out / "pct_increase_vs_params.csv"
    if groups:
        chart = {key: _stats([r.pct_increase for r in recs]) for key, recs in groups.items()}
        _bar_chart(out / "pct_increase_vs_fraction.svg",
                   "Percent validation gain from self-distillation", chart, "% increase")
        bundle.plots["pct_increase_vs_fraction"] = out / "pct_increase_vs_fraction.svg"

    # teacher -> student compression triads, with undistilled baselines when present
    baseline_val = {
        (r.cell["student"], r.cell["fraction"], r.cell["seed"]): r.student_val for r in baselines
    }
    triad_groups = _group(
        compression, lambda r: (r.cell["teacher"], r.cell["student"], r.cell["fraction"])
    )
    rows = []
    for key, recs in triad_groups.items():
        row = list(key)
        for name in ("teacher_val", "student_val", "pct_increase"):
            med, lo, hi = _stats([getattr(r, name) for r in recs])
            row += [med, lo, hi]
        base = [
            baseline_val[(r.cell["student"], r.cell["fraction"], r.cell["seed"])]
            for r in recs
            if (r.cell["student"], r.cell["fraction"], r.cell["seed"]) in baseline_val
        ]
        row.append(float(np.median(base)) if base else "")
        rows.append(row)
    _write_csv(
        out / "compression_triads.csv",
        ["teacher", "student", "fraction"]
        + [f"{f}_{s}" for f in ("teacher_val", "student_val", "pct_increase")
           for s in ("median", "min", "max")]
        + ["undistilled_val_median"],
        rows,
    )
    bundle.tables["compression_triads"] = out / "compression_triads.csv"
    if triad_groups:
        chart = {
            (f"{t}->{s}", frac): _stats([r.student_val for r in recs])
            for (t, s, frac), recs in triad_groups.items()
        }
        _bar_chart(out / "compression_triads.svg",
                   "Distilled student accuracy by teacher/student pair", chart, "val accuracy")
        bundle.plots["compression_triads"] = out / "compression_triads.svg"

    ledger_digest = hashlib.sha256(Path(ledger_path).read_bytes()).hexdigest()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "ledger": str(ledger_path),
        "ledger_sha256": ledger_digest,
        "source_cells": [r.config_hash for r in ok],
        "tables": {k: str(v) for k, v in bundle.tables.items()},
        "plots": {k: str(v) for k, v in bundle.plots.items()},
    }
    bundle.manifest = out / "report_manifest.json"
    bundle.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return bundle
