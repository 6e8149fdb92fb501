"""Figure rendering for evaluation reports and training logs.

Every function writes a PNG next to the CSV it illustrates and returns the
path.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def figsize(width=6.0, ratio=GOLDEN):
    return (width, width * ratio)


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_hits(reports, path, title="hits@k"):
    """Grouped bars: one group per k, one bar per report."""
    ks = sorted({k for r in reports for k in r.ks})
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        width = 0.8 / max(len(reports), 1)
        x = np.arange(len(ks))
        for i, r in enumerate(reports):
            vals = [r.hits.get(k, np.nan) for k in ks]
            label = r.task if r.task != "next_click" else f"{r.vector} ({r.candidates})"
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels([f"hits@{k}" for k in ks])
        ax.set_ylabel("hit rate (%)")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_market_similarity(sim, path, title="mean cosine similarity between markets"):
    with plt.rc_context(_STYLE):
        n = len(sim.markets)
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * n + 2), max(3.5, 0.35 * n + 1.5)))
        im = ax.imshow(sim.matrix, cmap="viridis", vmin=min(0.0, sim.matrix.min()), vmax=1.0)
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(sim.markets, rotation=90)
        ax.set_yticklabels(sim.markets)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_training(records, path, title="training progress"):
    """Loss (left axis) and validation hits@10 (right axis) against step."""
    steps = [r["step"] for r in records]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(steps, [r["loss"] for r in records], color="C0", lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("mean pair loss", color="C0")
        val = [(r["step"], r["val_hits10"]) for r in records if r.get("val_hits10") is not None]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), color="C1", marker="o", ms=3, lw=1.0)
            ax2.set_ylabel("validation hits@10 (%)", color="C1")
        ax.set_title(title)
        return _save(fig, path)
