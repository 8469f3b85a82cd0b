"""Report figures rendered to PNG with the non-interactive backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(rows, path, smooth=50):
    """Total and component losses against step; ``rows`` as written to the loss CSV."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError("loss rows must have five columns")
    fig, ax = plt.subplots(figsize=(6, 4))
    k = max(1, min(smooth, len(arr)))
    kernel = np.ones(k) / k
    for col, label in zip(range(1, 5), ("loss", "L_mos", "L_cl", "L_f")):
        y = np.convolve(arr[:, col], kernel, mode="valid")
        ax.plot(arr[k - 1 :, 0], y, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss ({k}-step mean)")
    ax.legend()
    return _save(fig, path)


def plot_iou_histogram(values, path, label="per-sample IoU"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(values, dtype=float), bins=np.linspace(0, 1, 21))
    ax.set_xlabel(label)
    ax.set_ylabel("samples")
    return _save(fig, path)


def plot_threshold_sweep(thetas, counts, mious, path):
    """Mean selected-instance count and instance mIoU as functions of θ."""
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(thetas, counts, "o-", color="tab:blue")
    ax1.set_xlabel("moving-probability threshold")
    ax1.set_ylabel("mean instances", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(thetas, mious, "s--", color="tab:orange")
    ax2.set_ylabel("mIoU_ins", color="tab:orange")
    return _save(fig, path)
