"""Report figures: ROC curve, training history and a per-domain AUC forest plot.

Figures are rendered with the non-interactive Agg backend and written to
files; nothing is ever shown on screen.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .domains import ALL_DOMAINS  # noqa: E402

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
FIG_WIDTH = 4.5
COLORS = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "font.family": "sans-serif",
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.figsize": [FIG_WIDTH, FIG_WIDTH * GOLDEN],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_roc(fpr, tpr, auc: float, path: "str | os.PathLike", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIG_WIDTH * 0.8, FIG_WIDTH * 0.8))
        ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=0.8)
        ax.step(fpr, tpr, where="post", label=f"AUC = {auc:.3f}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        if title:
            ax.set_title(title, fontsize=9)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_history(history: Sequence[dict], path: "str | os.PathLike") -> Path:
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train BCE")
        ax.set_xlabel("Epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("Train BCE")
        ax2 = ax.twinx()
        ax2.spines["right"].set_visible(True)
        ax2.plot(epochs, [h["test_auc"] for h in history], marker="s", color=COLORS[3], label="test AUC")
        ax2.set_ylabel("Test AUC")
        ax2.set_ylim(0, 1.02)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="center right")
        return _save(fig, path)


def plot_auc_table(reports: Sequence, path: "str | os.PathLike", bar: float = 0.75) -> Path:
    """Forest plot of AUC with its interval for every domain that has a report."""
    by_domain = {r.domain: r for r in reports}
    rows = [d.canonical for d in ALL_DOMAINS]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIG_WIDTH * 1.3, 0.35 * len(rows) + 0.8))
        for y, name in enumerate(rows):
            r = by_domain.get(name)
            if r is None:
                continue
            ax.plot([r.ci_low, r.ci_high], [y, y], color=COLORS[1])
            ax.plot([r.auc], [y], marker="D", color=COLORS[0])
        ax.axvline(bar, ls=":", color="0.5", lw=0.8)
        ax.axvline(0.5, ls="--", color="0.8", lw=0.8)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(rows)
        ax.set_ylim(len(rows) - 0.5, -0.5)
        ax.set_xlim(0, 1.02)
        ax.set_xlabel("AUC [95% CI]")
        return _save(fig, path)
