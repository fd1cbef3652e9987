"""Static figures for evaluation reports (Agg backend, no display)."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_error_histogram(tables: dict, path, column: str = "minade6", bins: int = 60) -> Path:
    """Overlaid per-agent error distributions, log-scaled counts to expose the tail."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    hi = max(float(t[column].max()) for t in tables.values())
    edges = np.linspace(0.0, max(hi, 1e-6), bins + 1)
    for name, table in tables.items():
        ax.hist(table[column], bins=edges, histtype="step", label=name)
    ax.set_yscale("log")
    ax.set_xlabel(f"{column} (m)")
    ax.set_ylabel("agents")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _series(history: dict, key: str):
    xs, ys = [], []
    for row in history["epochs"]:
        snap = row.get("snapshot") or {}
        val = snap.get(key, row.get(key))
        if val is not None and not (isinstance(val, float) and math.isnan(val)):
            xs.append(row["epoch"])
            ys.append(val)
    return xs, ys


def plot_curves(histories: dict, path, keys=("train_error", "minade6", "var999")) -> Path:
    """Per-epoch metric curves, one panel per key; the loop start is marked."""
    path = Path(path)
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for name, hist in histories.items():
            xs, ys = _series(hist, key)
            if xs:
                ax.plot(xs, ys, marker="o", label=name)
        starts = {h.get("initial_epochs") for h in histories.values()} - {None}
        for s in starts:
            ax.axvline(s + 0.5, color="grey", linestyle=":")
        ax.set_xlabel("epoch")
        ax.set_title(key)
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
