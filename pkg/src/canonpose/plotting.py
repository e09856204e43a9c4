"""Deterministic PNG figures for training curves and metric reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import LOSS_COLUMNS, smoothed  # noqa: E402

_META = {"Software": None}


def plot_loss_curves(history, path, window: int = 100) -> None:
    """Smoothed per-term losses on a log axis, one line per loss column."""
    steps = [row["step"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    for name in LOSS_COLUMNS:
        values = [abs(row.get(name, 0.0)) for row in history]
        if any(values):
            ax.plot(steps, smoothed(values, window), label=name, linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving average, window {window})")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_metrics(reports, path) -> None:
    labels = [f"{r.metric}\n{r.category}" for r in reports]
    values = [r.value for r in reports]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(reports)), 4), dpi=100)
    bars = ax.bar(range(len(values)), values, color="tab:blue")
    for bar, v in zip(bars, values):
        ax.annotate(f"{v:.4g}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("value")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
