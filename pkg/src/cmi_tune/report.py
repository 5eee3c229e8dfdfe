"""Consolidate run directories into a CSV, a markdown table and figures.

Baseline and CMI runs are shown as a two-row comparison with a delta row
underneath each regularised method. The output depends only on the files
read, so re-running on the same inputs reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import plots
from .trainer import RunReport, median_run

COLUMNS = ["path", "kind", "lambda", "seed", "status", "best_epoch", "metric", "accuracy", "f1",
           "mcc", "train_cmi", "dev_cmi", "clip_events"]
TABLE_FIELDS = [("metric", "metric"), ("accuracy", "accuracy"), ("f1", "F1"), ("mcc", "MCC"),
                ("train_cmi", "train CMI"), ("dev_cmi", "dev CMI")]
_KIND_NAMES = {"off": "Baseline", "min": "Min-CMI", "max": "Max-CMI", "distill": "Student"}


class ReportError(ValueError):
    pass


def _num(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        return float(v)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (_num(v) if k not in ("row_type", "status", "checkpoint", "teacher") else v)
                 for k, v in row.items()} for row in csv.DictReader(fh)]


def collect_reports(run_dir, exclude=None) -> list[tuple[str, RunReport]]:
    root = Path(run_dir)
    if not root.is_dir():
        raise ReportError(f"{run_dir} is not a directory")
    skip = Path(exclude).resolve() if exclude is not None else None
    found = []
    for path in sorted(root.rglob("report.json")):
        if skip is not None and skip in path.resolve().parents:
            continue
        try:
            found.append((path.relative_to(root).as_posix(), RunReport.load(path)))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ReportError(f"{path}: not a run report ({exc})") from None
    return found


def _kind(report: RunReport) -> str:
    return "distill" if "alpha" in report.config else report.config.get("cmi_sign", "off")


def summary_row(path: str, report: RunReport) -> dict:
    best = report.best
    metrics = best.metrics if best else {}
    return {"path": path, "kind": _kind(report), "lambda": report.lam, "seed": report.seed,
            "status": report.status, "best_epoch": report.best_epoch,
            "metric": best.metric if best else None, "accuracy": metrics.get("accuracy"),
            "f1": metrics.get("f1"), "mcc": metrics.get("mcc"),
            "train_cmi": best.train_cmi if best else None,
            "dev_cmi": best.dev_cmi if best else None, "clip_events": report.clip_events}


def method_groups(reports: list[tuple[str, RunReport]]) -> dict[tuple[str, float], tuple[str, RunReport]]:
    """Median (path, report) per (kind, lambda) among fine-tuning runs."""
    groups: dict[tuple[str, float], list[tuple[str, RunReport]]] = {}
    for path, r in reports:
        kind = _kind(r)
        if kind != "distill":
            groups.setdefault((kind, float(r.lam)), []).append((path, r))
    order = {"off": 0, "min": 1, "max": 2}
    out = {}
    for key in sorted(groups, key=lambda k: (order.get(k[0], 3), k[1])):
        med = median_run([r for _, r in groups[key]])
        if med is not None:
            out[key] = next(item for item in groups[key] if item[1] is med)
    return out


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _delta(a, b):
    return None if a is None or b is None else a - b


def comparison_table(groups) -> list[str]:
    head = "| Method | " + " | ".join(label for _, label in TABLE_FIELDS) + " |"
    lines = [head, "|" + "---|" * (len(TABLE_FIELDS) + 1)]
    base = next((summary_row(p, r) for (k, _), (p, r) in groups.items() if k == "off"), None)
    for (kind, lam), (path, report) in groups.items():
        row = summary_row(path, report)
        name = _KIND_NAMES[kind] if kind == "off" else f"{_KIND_NAMES.get(kind, kind)} (lambda={lam:g})"
        lines.append(f"| {name} | " + " | ".join(_fmt(row[f]) for f, _ in TABLE_FIELDS) + " |")
        if kind != "off" and base is not None:
            deltas = [_delta(row[f], base[f]) for f, _ in TABLE_FIELDS]
            lines.append("| delta vs baseline | "
                         + " | ".join("n/a" if d is None else f"{d:+.4f}" for d in deltas) + " |")
    return lines


def teacher_table(rows: list[dict]) -> list[str]:
    lines = ["| Teacher | teacher metric | best alpha | best T | student metric |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['teacher']} | {_fmt(r['teacher_metric'])} | {r['best_alpha']:g} | "
                     f"{r['best_temperature']:g} | {_fmt(r['student_metric'])} |")
    by_name = {r["teacher"]: r for r in rows}
    if "baseline" in by_name and len(rows) == 2:
        other = next(r for r in rows if r["teacher"] != "baseline")
        d = other["student_metric"] - by_name["baseline"]["student_metric"]
        lines.append(f"| delta ({other['teacher']} - baseline) | | | | {d:+.4f} |")
    return lines


def grid_table(rows: list[dict]) -> list[str]:
    lines = ["| alpha | T | median student metric |", "|---|---|---|"]
    for r in rows:
        if r["row_type"] == "median":
            lines.append(f"| {r['alpha']:g} | {r['temperature']:g} | {_fmt(r['metric'])} |")
    return lines


def build_report(run_dir, out_dir) -> dict[str, Path]:
    """Write report.csv, report.md and figures/ under ``out_dir``; returns the paths."""
    root, out = Path(run_dir), Path(out_dir)
    reports = collect_reports(root, exclude=out)
    if not reports:
        raise ReportError(f"no report.json files under {run_dir}")
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        for path, r in reports:
            w.writerow({k: "" if v is None else v for k, v in summary_row(path, r).items()})
    written["csv"] = out / "report.csv"

    groups = method_groups(reports)
    md = ["# Run report", "", f"{len(reports)} run reports under `{root.resolve().name}`.", ""]
    if groups:
        md += ["## Fine-tuning", "", "Median run per method; delta rows subtract the baseline.", ""]
        md += comparison_table(groups) + [""]
        curves = {}
        for (kind, lam), (_, r) in groups.items():
            label = "baseline" if kind == "off" else f"{kind} {lam:g}"
            curves[label] = [{"epoch": e.epoch, "metric": e.metric, "train_cmi": e.train_cmi}
                             for e in r.epochs]
        written["training_curves"] = plots.training_curves(curves, out / "figures" / "training_curves.png")
        md += ["![training curves](figures/training_curves.png)", ""]

    for i, path in enumerate(sorted(root.rglob("sweep_summary.csv"))):
        rows = read_csv(path)
        name = f"sweep_{i}.png"
        written[f"sweep_{i}"] = plots.sweep_curves(rows, out / "figures" / name)
        md += [f"## Sweep `{path.relative_to(root).as_posix()}`", "", f"![sweep](figures/{name})", ""]

    for i, path in enumerate(sorted(root.rglob("distill_grid.csv"))):
        rows = read_csv(path)
        name = f"distill_grid_{i}.png"
        written[f"distill_{i}"] = plots.distill_heatmap(rows, out / "figures" / name)
        md += [f"## Distillation grid `{path.relative_to(root).as_posix()}`", ""]
        md += grid_table(rows) + ["", f"![grid](figures/{name})", ""]

    for i, path in enumerate(sorted(root.rglob("teacher_comparison.csv"))):
        rows = read_csv(path)
        name = f"teacher_comparison_{i}.png"
        written[f"teachers_{i}"] = plots.comparison_bars(
            {r["teacher"]: r["student_metric"] for r in rows}, out / "figures" / name,
            ylabel="best student metric", title="student by teacher")
        md += ["## Teacher comparison", ""] + teacher_table(rows)
        md += ["", f"![teachers](figures/{name})", ""]

    (out / "report.md").write_text("\n".join(md).rstrip("\n") + "\n")
    written["markdown"] = out / "report.md"
    return written
