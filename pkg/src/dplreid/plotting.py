"""Figures written next to the CSV/JSON outputs: loss curves and CMC curves."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps identical inputs byte-identical on disk.
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[Mapping[str, float]], columns: Sequence[str], path, title: str = "") -> Path:
    """One line per loss column against the epoch column."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r["epoch"] for r in rows]
        for col in columns:
            ax.plot(epochs, [r[col] for r in rows], marker="o", markersize=2.5, linewidth=1.2, label=col)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_cmc(curves: Dict[str, Sequence[float]], path, max_rank: int = 20, title: str = "") -> Path:
    """CMC curves (rank-k hit rate) for one or more reports."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, cmc in curves.items():
            cmc = np.asarray(cmc)[:max_rank]
            ax.plot(np.arange(1, len(cmc) + 1), cmc, marker=".", linewidth=1.2, label=label)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0.0, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)
