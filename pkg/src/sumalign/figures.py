"""Matplotlib figures written next to the delimited report files."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRICS, ScoreReport  # noqa: E402

DPI = 120
COLORS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_score_distributions(reports: Sequence[ScoreReport], path: str | Path) -> Path:
    """Box plot per metric with the per-sample mean marked by '+'.

    When the first report carries significance results, the star band is
    printed above each metric's panel.
    """
    fig, axes = plt.subplots(1, len(METRICS), figsize=(3.2 * len(METRICS), 3.4), sharey=True)
    for ax, metric in zip(axes, METRICS):
        data = [[100 * s for s in r.per_sample[metric]] for r in reports]
        ax.boxplot(data, showfliers=False, widths=0.6)
        for i, d in enumerate(data, 1):
            if d:
                ax.plot(i, sum(d) / len(d), marker="+", color="k", markersize=10, mew=1.5)
        ax.set_xticks(range(1, len(reports) + 1))
        ax.set_xticklabels([r.label for r in reports], rotation=20)
        title = metric
        sig = reports[0].significance.get(metric) if reports else None
        if sig:
            title += f"  ({sig['stars']})"
        ax.set_title(title)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylabel("score (%)")
    return _save(fig, path)


def plot_length_buckets(report: ScoreReport, key: str, path: str | Path, xlabel: str | None = None) -> Path:
    """Mean score per length interval, one line per metric."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    buckets = report.buckets.get(key, {})
    for color, metric in zip(COLORS, METRICS):
        bs = buckets.get(metric, [])
        if not bs:
            continue
        ax.plot([b.label for b in bs], [100 * b.mean for b in bs], marker="o", color=color, label=metric)
    ax.set_xlabel(xlabel or key.replace("_", " "))
    ax.set_ylabel("mean score (%)")
    ax.tick_params(axis="x", rotation=30)
    ax.grid(alpha=0.3)
    if buckets:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_loss_curves(loss_csv: str | Path, path: str | Path) -> Path:
    """Per-task and joint pre-training losses from a loss log."""
    cols: dict[str, list[float]] = {}
    steps: list[int] = []
    with open(loss_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for k, v in row.items():
                if k != "step":
                    cols.setdefault(k, []).append(float(v) if v else float("nan"))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for color, (name, vals) in zip(COLORS, cols.items()):
        if all(v != v for v in vals):
            continue
        ax.plot(steps, vals, color=color, lw=1.2 if name == "joint" else 0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, dict[str, float]]], path: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per configuration."""
    fig, ax = plt.subplots(figsize=(6, 3.4))
    width = 0.8 / max(len(rows), 1)
    for k, (color, (name, vals)) in enumerate(zip(COLORS, rows)):
        xs = [i + k * width for i in range(len(METRICS))]
        ax.bar(xs, [vals.get(m, 0.0) for m in METRICS], width, color=color, label=name)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(METRICS))])
    ax.set_xticklabels(METRICS)
    ax.set_ylabel("score (%)")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
