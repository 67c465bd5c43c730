"""Matplotlib figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_training_curves", "plot_entropy_grid", "plot_dataset", "plot_oracle_profile"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(records: Sequence, path, title: Optional[str] = None) -> Path:
    """Accuracy, loss and weight norm against step (log step axis)."""
    steps = np.array([r.step for r in records], dtype=float)
    x = np.maximum(steps, 1.0)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    ax.plot(x, [r.train_acc for r in records], label="train")
    ax.plot(x, [r.test_acc for r in records], label="test")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best")
    ax = axes[1]
    ax.plot(x, [r.train_loss for r in records], label="train")
    ax.plot(x, [r.test_loss for r in records], label="test")
    ax.set_yscale("log")
    ax.set_ylabel("cross-entropy")
    ax.legend(loc="best")
    axes[2].plot(x, [r.weight_norm for r in records], color="k")
    axes[2].set_ylabel("weight norm")
    for ax in axes:
        ax.set_xscale("log")
        ax.set_xlabel("step")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_entropy_grid(grid, path, trajectories: Optional[Sequence] = None,
                      title: Optional[str] = None) -> Path:
    """Heat map of S over (ln loss, test accuracy); unvisited cells blank."""
    S = np.ma.masked_where(~grid.visited, grid.S)
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    mesh = ax.pcolormesh(grid.lnL_edges, grid.acc_edges, S.T, cmap="viridis", shading="flat")
    fig.colorbar(mesh, ax=ax, label="S")
    for traj in trajectories or ():
        if len(traj):
            arr = np.asarray(traj, dtype=float)
            ax.plot(arr[:, 1], arr[:, 2], lw=0.6, alpha=0.7, color="w")
    ax.set_xlabel("ln train loss")
    ax.set_ylabel("test accuracy")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_dataset(matrix: np.ndarray, path, title: Optional[str] = None) -> Path:
    """Answer table as an image; row x, column y, masked cells blank."""
    m = np.ma.masked_less(np.asarray(matrix), 0)
    fig, ax = plt.subplots(figsize=(4.8, 4.8))
    ax.imshow(m, cmap="twilight", interpolation="nearest", origin="upper")
    ax.set_xlabel("y")
    ax.set_ylabel("x")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_oracle_profile(U: np.ndarray, S: np.ndarray, analytic: np.ndarray, path,
                        title: Optional[str] = None) -> Path:
    """Recovered against analytic entropy, both shifted to mean zero."""
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.plot(U, S - S.mean(), "o", ms=3, label="recovered")
    ax.plot(U, analytic - analytic.mean(), "-", label="analytic")
    ax.set_xlabel("U")
    ax.set_ylabel("S (mean removed)")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    return _save(fig, path)
