"""Matplotlib figures for run, sweep and distillation reports.

Everything renders through the Agg backend to PNG files. Metadata is pinned
so that identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "figure.dpi": 120,
    "svg.hashsalt": "cmi-tune",
}
_PNG_META = {"Software": None}
GOLDEN = (5 ** 0.5 - 1) / 2


def figsize(width: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def training_curves(runs: dict[str, list[dict]], path) -> Path:
    """Dev metric and train CMI per epoch, one line per named run.

    ``runs`` maps a label to epoch records (dicts with ``epoch``, ``metric``
    and ``train_cmi``).
    """
    with plt.rc_context(STYLE):
        fig, (ax_m, ax_c) = plt.subplots(1, 2, figsize=figsize(8.0, 0.4))
        for label, epochs in runs.items():
            xs = [e["epoch"] for e in epochs]
            ax_m.plot(xs, [e["metric"] for e in epochs], marker="o", ms=3, label=label)
            ax_c.plot(xs, [e["train_cmi"] for e in epochs], marker="o", ms=3, label=label)
        ax_m.set(xlabel="epoch", ylabel="dev metric", title="evaluation metric")
        ax_c.set(xlabel="epoch", ylabel="train CMI (nats)", title="conditional mutual information")
        ax_c.set_yscale("log")
        ax_m.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def sweep_curves(rows: list[dict], path) -> Path:
    """Median metric and CMI against lambda, with individual runs as dots."""
    runs = [r for r in rows if r["row_type"] == "run" and r["metric"] is not None]
    meds = sorted((r for r in rows if r["row_type"] == "median"), key=lambda r: r["lambda"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.5))
        ax.scatter([r["lambda"] for r in runs], [r["metric"] for r in runs], s=10, color="0.6",
                   label="runs")
        ax.plot([r["lambda"] for r in meds], [r["metric"] for r in meds], marker="o", color="C0",
                label="median metric")
        ax.set(xlabel="lambda", ylabel="dev metric")
        twin = ax.twinx()
        twin.plot([r["lambda"] for r in meds], [r["cmi"] for r in meds], marker="s", color="C3",
                  label="median CMI")
        twin.set_ylabel("train CMI (nats)")
        handles = ax.get_legend_handles_labels()[0] + twin.get_legend_handles_labels()[0]
        ax.legend(handles, [h.get_label() for h in handles], frameon=False, loc="best")
        fig.tight_layout()
        return _save(fig, path)


def comparison_bars(values: dict[str, float], path, ylabel: str = "dev metric",
                    title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.5))
        names = list(values)
        bars = ax.bar(names, [values[n] for n in names], color=[f"C{i}" for i in range(len(names))])
        for bar in bars:
            ax.annotate(f"{bar.get_height():.3f}", (bar.get_x() + bar.get_width() / 2,
                                                     bar.get_height()),
                        ha="center", va="bottom", fontsize=8)
        ax.set(ylabel=ylabel, title=title)
        fig.tight_layout()
        return _save(fig, path)


def distill_heatmap(rows: list[dict], path) -> Path:
    """Median student metric over the (alpha, T) grid."""
    meds = [r for r in rows if r["row_type"] == "median"]
    alphas = sorted({r["alpha"] for r in meds})
    temps = sorted({r["temperature"] for r in meds})
    grid = [[float("nan")] * len(temps) for _ in alphas]
    for r in meds:
        grid[alphas.index(r["alpha"])][temps.index(r["temperature"])] = r["metric"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.5, 0.8))
        im = ax.imshow(grid, cmap="viridis", origin="lower", aspect="auto")
        ax.set_xticks(range(len(temps)), [f"{t:g}" for t in temps])
        ax.set_yticks(range(len(alphas)), [f"{a:g}" for a in alphas])
        ax.set(xlabel="temperature", ylabel="alpha", title="student metric")
        for i, row in enumerate(grid):
            for j, v in enumerate(row):
                ax.text(j, i, f"{v:.3f}", ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        return _save(fig, path)
