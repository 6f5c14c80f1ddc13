"""Figures written next to the tab-separated outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(history: list[dict], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    steps = np.arange(len(history))
    for key, style in (("total", "-"), ("cls", "--"), ("loc", ":"), ("dir", "-.")):
        vals = [h[key] for h in history]
        if vals:
            ax.plot(steps, vals, style, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if history and min(h["total"] for h in history) > 0:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if history:
        ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pr_curves(curves: dict, path) -> Path:
    """``curves`` maps a label to ``(recall, precision)`` arrays."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 5.0), dpi=100)
    for label, (rec, prec) in sorted(curves.items()):
        if len(rec):
            ax.step(rec, prec, where="post", label=label)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.grid(True, alpha=0.3)
    if any(len(r) for r, _ in curves.values()):
        ax.legend(fontsize=8)
    ax.set_title("precision / recall")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
