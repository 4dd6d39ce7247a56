"""Delimited outputs and the matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_io import SweepResult
from .training import FoldResult, TrainHistory

_METRIC_NAMES = ("accuracy", "sensitivity", "specificity")


def fmt9(x) -> str:
    return format(float(x), ".9g")


def format_summary_line(name: str, mean: float, std: float) -> str:
    """Percent-style summary, e.g. 'accuracy 65.4±3.0 %'."""
    return f"{name} {100 * mean:.1f}±{100 * std:.1f} %"


def _new_axes(width=6.0, height=3.6):
    fig, ax = plt.subplots(figsize=(width, height), dpi=120)
    ax.grid(True, alpha=0.3)
    return fig, ax


def write_fold_metrics(rows: list[FoldResult], summary: dict, outdir: str) -> str:
    """metrics.csv (one row per fold), summary.csv, summary.txt, metrics.png."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "metrics.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "repeat", "accuracy", "sensitivity", "specificity"])
        for r in rows:
            writer.writerow(
                [r.fold, r.repeat]
                + [fmt9(getattr(r.metrics, m)) for m in _METRIC_NAMES]
            )
    with open(os.path.join(outdir, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std"])
        for name in _METRIC_NAMES:
            mean, std = summary[name]
            writer.writerow([name, fmt9(mean), fmt9(std)])
    with open(os.path.join(outdir, "summary.txt"), "w", encoding="utf-8") as fh:
        for name in _METRIC_NAMES:
            fh.write(format_summary_line(name, *summary[name]) + "\n")

    fig, ax = _new_axes()
    for i, name in enumerate(_METRIC_NAMES):
        vals = [getattr(r.metrics, name) for r in rows]
        ax.scatter([i] * len(vals), vals, alpha=0.6, s=18)
        mean, std = summary[name]
        ax.errorbar([i], [mean], yerr=[std], fmt="_", color="k", capsize=6, lw=1.5)
    ax.set_xticks(range(len(_METRIC_NAMES)), _METRIC_NAMES)
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.set_title("cross-validation folds")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "metrics.png"))
    plt.close(fig)
    return path


def write_history(history: TrainHistory, outdir: str) -> str:
    """history.csv (per epoch) and history.png."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "history.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for e, (loss, acc) in enumerate(zip(history.train_loss, history.val_accuracy), 1):
            writer.writerow([e, fmt9(loss), fmt9(acc)])
        writer.writerow(["best_epoch", history.best_epoch, history.stop_reason])

    epochs = np.arange(1, len(history.train_loss) + 1)
    fig, ax = _new_axes()
    ax.plot(epochs, history.train_loss, label="train loss", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, history.val_accuracy, label="val accuracy", color="tab:orange")
    ax2.set_ylabel("validation accuracy", color="tab:orange")
    ax2.set_ylim(0, 1.02)
    ax.axvline(history.best_epoch, color="gray", ls="--", lw=1)
    ax.set_title(f"training ({history.stop_reason} at epoch {len(epochs)})")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "history.png"))
    plt.close(fig)
    return path


def write_kernels(kernels: np.ndarray, csv_path: str, verify_dev: float | None = None) -> str:
    """One CSV row per channel (9 significant digits) plus a decay figure."""
    kernels = np.atleast_2d(np.asarray(kernels))
    outdir = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(outdir, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in kernels:
            writer.writerow([fmt9(v) for v in row])

    fig, ax = _new_axes()
    for i, row in enumerate(kernels[:8]):
        ax.plot(row, lw=1, alpha=0.8, label=f"channel {i}" if kernels.shape[0] <= 8 else None)
    ax.set_xlabel("lag")
    ax.set_ylabel("kernel value")
    title = f"{kernels.shape[0]} kernels, length {kernels.shape[1]}"
    if verify_dev is not None:
        title += f" (max oracle deviation {verify_dev:.2e})"
    ax.set_title(title)
    if kernels.shape[0] <= 8:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.splitext(csv_path)[0] + ".png")
    plt.close(fig)
    return csv_path


def write_sweep(result: SweepResult, outdir: str) -> str:
    """sweep.csv (one row per size, seed accuracies and mean±std) + sweep.png."""
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "seeds", "accuracies", "mean_accuracy", "std_accuracy"])
        for row in result.rows:
            writer.writerow(
                [
                    row.size,
                    ";".join(str(s) for s in row.seeds),
                    ";".join(fmt9(a) for a in row.accuracies),
                    fmt9(row.mean_accuracy),
                    fmt9(row.std_accuracy),
                ]
            )

    fig, ax = _new_axes()
    sizes = [r.size for r in result.rows]
    means = [r.mean_accuracy for r in result.rows]
    stds = [r.std_accuracy for r in result.rows]
    ax.errorbar(sizes, means, yerr=stds, marker="o", capsize=4)
    ax.set_xlabel("training samples")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"sample scaling (fixed test set, n={len(result.test_ids)})")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "sweep.png"))
    plt.close(fig)
    return path
