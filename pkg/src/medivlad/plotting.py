"""Figures written next to the CSV/JSON outputs (headless Agg backend)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}

CLASS_NAMES = ("A-line", "B-line", "consolidation")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def read_loss_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def plot_loss(rows, path, title: str = "training loss") -> Path:
    """Per-step loss (thin) with epoch means (markers). ``rows`` are (epoch, step, loss)."""
    rows = read_loss_csv(rows) if isinstance(rows, (str, Path)) else list(rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        if rows:
            epochs, steps, losses = map(np.asarray, zip(*rows))
            ax.plot(steps, losses, lw=0.7, alpha=0.6, label="step")
            ends = [steps[epochs == e].max() for e in np.unique(epochs)]
            means = [losses[epochs == e].mean() for e in np.unique(epochs)]
            ax.plot(ends, means, "o-", ms=3, label="epoch mean")
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)


def plot_confusion(confusion, path, title: str = "confusion", labels=CLASS_NAMES) -> Path:
    cm = np.asarray(confusion)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3))
        ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > cm.max() / 2 else "black")
        ticks = range(len(cm))
        ax.set_xticks(ticks, labels[:len(cm)], rotation=30, ha="right")
        ax.set_yticks(ticks, labels[:len(cm)])
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        return _save(fig, path)


def plot_attention(frame, maps, path, title: str = "") -> Path:
    """Frame, then each head map and the mean map overlaid. ``maps`` are (H, W) arrays, mean last."""
    frame = np.asarray(frame)
    n = len(maps) + 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9))
        axes[0].imshow(frame, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("frame")
        for i, (ax, m) in enumerate(zip(axes[1:], maps)):
            ax.imshow(frame, cmap="gray", vmin=0, vmax=1)
            ax.imshow(m, cmap="inferno", alpha=0.6)
            ax.set_title("mean" if i == len(maps) - 1 else f"head {i}")
        for ax in axes:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_video_weights(weights, labels, path, title: str = "frame weights") -> Path:
    """Heatmap of frame-assignment weights, one row per video, sorted by label."""
    w = np.asarray(weights)
    order = np.argsort(np.asarray(labels), kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.imshow(w[order], aspect="auto", cmap="viridis")
        ax.set_xlabel("frame")
        ax.set_ylabel("video (by label)")
        ax.set_title(title)
        return _save(fig, path)
