"""Delimited reports and their companion figures.

Every subcommand that writes a CSV also renders a matplotlib figure
next to it, so runs can be skimmed without loading the numbers.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

METRIC_NAMES = ("image_auroc", "pixel_auroc", "aupro", "pixel_ap")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path, payload: Dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def loss_figure(path, epochs: Sequence[int],
                components: Dict[str, Sequence[float]]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, values in components.items():
        ax.plot(epochs, values, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss components")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def metrics_figure(path, per_class: Dict[str, Dict[str, float]],
                   macro: Dict[str, float]) -> None:
    names = sorted(per_class) + ["macro"]
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(names), 4.2))
    x = np.arange(len(names))
    width = 0.8 / len(METRIC_NAMES)
    for i, metric in enumerate(METRIC_NAMES):
        vals = [per_class[n].get(metric, np.nan) for n in sorted(per_class)]
        vals.append(macro.get(metric, np.nan))
        ax.bar(x + (i - 1.5) * width, vals, width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("evaluation metrics")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ablation_figure(path, rows: List[Dict]) -> None:
    """Mean pixel AUROC per ablation cell, seeds averaged."""
    cells: Dict[str, List[float]] = {}
    for row in rows:
        cells.setdefault(str(row["cell"]), []).append(
            float(row["pixel_auroc"]))
    names = sorted(cells)
    means = [float(np.mean(cells[n])) for n in names]
    spreads = [float(np.std(cells[n])) for n in names]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(names), 4.2))
    ax.bar(names, means, yerr=spreads, capsize=4, color="#4878a8")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean pixel AUROC")
    ax.set_title("ablation grid")
    ax.grid(axis="y", alpha=0.3)
    for i, m in enumerate(means):
        ax.text(i, m + 0.02, f"{m:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def heatmap_figure(path, probs: np.ndarray) -> None:
    """Color-mapped probability map, written at the input's pixel size."""
    h, w = probs.shape
    fig = plt.figure(figsize=(w / 100.0, h / 100.0), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(probs, cmap="magma", vmin=0.0, vmax=1.0,
              interpolation="nearest")
    ax.set_axis_off()
    fig.savefig(path, dpi=100)
    plt.close(fig)
