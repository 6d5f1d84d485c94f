"""Matplotlib figures written next to the CSV tables."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_COLUMNS = ("mA", "Accu", "Prec", "Recall", "F1")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_bars(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Grouped bars: one group per head configuration, one bar per metric."""
    fig, ax = plt.subplots(figsize=(8, 3.6))
    width = 0.8 / len(METRIC_COLUMNS)
    for k, metric in enumerate(METRIC_COLUMNS):
        xs = [i + (k - (len(METRIC_COLUMNS) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [r[metric] for r in rows], width, label=metric)
    ax.set_xticks(range(len(rows)), [r["method"] for r in rows], rotation=15, ha="right")
    lo = min(min(r[m] for m in METRIC_COLUMNS) for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_ylabel("score")
    ax.legend(ncol=5, fontsize=8, loc="lower center")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, Path(path))


def batch_sweep(results: Mapping[str, Mapping[int, Mapping[str, float]]], path: str | Path) -> Path:
    """mA and F1 against batch size, one line per method."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, metric in zip(axes, ("mA", "F1")):
        for method, by_bs in results.items():
            sizes = sorted(by_bs)
            ax.plot(sizes, [by_bs[b][metric] for b in sizes], marker="o", label=method)
        ax.set_xscale("log", base=2)
        ax.set_xticks(sorted({b for v in results.values() for b in v}))
        ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
        ax.set_xlabel("batch size")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    return _save(fig, Path(path))


def per_attribute(names: Sequence[str], series: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    """Per-attribute mA, one bar per series."""
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 3.4))
    width = 0.8 / max(1, len(series))
    for k, (label, values) in enumerate(series.items()):
        xs = [i + (k - (len(series) - 1) / 2) * width for i in range(len(names))]
        ax.bar(xs, values, width, label=label)
    ax.set_xticks(range(len(names)), names, rotation=40, ha="right")
    ax.set_ylabel("mA")
    lo = min(min(v) for v in series.values())
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, Path(path))


def training_curves(history: Sequence, path: str | Path) -> Path:
    epochs = [h.epoch for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(epochs, [h.loss_wce for h in history], label="weighted CE")
    if any(h.loss_awk for h in history):
        ax1.plot(epochs, [h.loss_awk for h in history], label="keypoint heatmap")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [h.val_mA for h in history], marker=".")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation mA")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    return _save(fig, Path(path))
