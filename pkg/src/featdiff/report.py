"""Figure rendering for stage reports.

Every report path writes a PNG next to its delimited output: loss curves for
the training stages, candidate scores for generation, and grouped bars for
the benchmark table.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["write_loss_curve", "plot_candidates", "plot_bench"]


def write_loss_curve(history: list[dict], csv_path, png_path, title: str) -> None:
    csv_path, png_path = Path(csv_path), Path(png_path)
    fields = list(history[0].keys())
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row["epoch"] for row in history]
    for key in fields:
        if key == "epoch":
            continue
        ax.plot(xs, [row[key] for row in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_candidates(candidates: list[dict], baseline: float, png_path, title: str) -> None:
    """Predicted reward per candidate, actual downstream score where known."""
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(candidates))
    ax.bar(xs, [c["predicted"] for c in candidates], color="#7aa6c2", label="predicted reward")
    actual = [(i, c["actual"]) for i, c in enumerate(candidates) if c.get("actual") is not None]
    if actual:
        ax.scatter([i for i, _ in actual], [v for _, v in actual],
                   color="#d1495b", zorder=3, label="actual score")
    ax.axhline(baseline, color="gray", ls="--", lw=1, label="raw baseline")
    ax.set_xlabel("candidate rank")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_bench(rows: list[dict], png_path, title: str) -> None:
    """rows: {dataset, method, mean, std}."""
    datasets = sorted({r["dataset"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(1.8 * max(4, len(datasets) * len(methods) / 2), 4))
    width = 0.8 / max(1, len(methods))
    for j, method in enumerate(methods):
        xs, ys, es = [], [], []
        for i, dsname in enumerate(datasets):
            cell = [r for r in rows if r["dataset"] == dsname and r["method"] == method]
            if not cell or cell[0].get("mean") is None:
                continue
            xs.append(i + j * width)
            ys.append(cell[0]["mean"])
            es.append(cell[0].get("std") or 0.0)
        ax.bar(xs, ys, width=width, yerr=es, capsize=3, label=method)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(datasets))])
    ax.set_xticklabels(datasets, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("score")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
