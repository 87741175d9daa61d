"""Matplotlib figure rendering for the report paths.

Training writes a loss-curve figure next to its metrics CSV; evaluation
writes a metric bar chart next to its report CSV. Figures are side
outputs; the delimited files stay the contractual record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import FormatError  # noqa: E402
from .evaluation import MetricReport  # noqa: E402

_PART_LABELS = ("total", "box mse", "giou", "confidence", "class")


def read_metrics_csv(path) -> np.ndarray:
    """Metrics log -> (n, 7) array: iteration, lr multiplier, five losses."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise FormatError(f"{path}: empty metrics log")
    if rows.shape[1] != 7:
        raise FormatError(f"{path}: expected 7 columns, got {rows.shape[1]}")
    return rows


def plot_training_curves(metrics_csv, out_png) -> Path:
    rows = read_metrics_csv(metrics_csv)
    it = rows[:, 0]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True, gridspec_kw={"height_ratios": [3, 1]}
    )
    for col, label in zip(range(2, 7), _PART_LABELS):
        ax_loss.plot(it, rows[:, col], label=label, linewidth=1.2)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8, ncol=2)
    ax_loss.grid(alpha=0.3)
    ax_lr.plot(it, rows[:, 1], color="tab:gray")
    ax_lr.set_ylabel("lr multiplier")
    ax_lr.set_xlabel("iteration")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_metric_report(report: MetricReport, out_png) -> Path:
    names = ["Precision", "Sensitivity", "F1", "F2"]
    values = [report.precision, report.sensitivity, report.f1, report.f2]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(names))
    heights = [v if v is not None else 0.0 for v in values]
    bars = ax.bar(xs, heights, color="tab:blue")
    for bar, v in zip(bars, values):
        label = "NA" if v is None else f"{v:.2f}"
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height() + 1, label,
                ha="center", fontsize=9)
    ax.set_xticks(xs, names)
    ax.set_ylim(0, 110)
    ax.set_ylabel("percent")
    c = report.counts
    dice_txt = "NA" if report.dice is None else f"{report.dice:.4f}"
    ax.set_title(f"TP {c.tp} / FP {c.fp} / FN {c.fn} / TN {c.tn}   dice {dice_txt}")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
