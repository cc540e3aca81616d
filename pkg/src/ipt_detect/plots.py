"""Rendered figures: confusion-matrix heatmap and per-track IPT piano-rolls."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # figures are files, never windows
import matplotlib.pyplot as plt
import numpy as np

from .dataset import HOP_LENGTH, SAMPLE_RATE, IptClass
from .evaluation import mlcm_labels, normalize_rows


def plot_mlcm(matrix: np.ndarray, path: str | Path, title: str = "Multi-label confusion matrix") -> Path:
    """Heatmap of row proportions, annotated with raw counts."""
    matrix = np.asarray(matrix)
    props = normalize_rows(matrix)
    rows, cols = mlcm_labels()
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(props, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            if matrix[i, j]:
                color = "white" if props[i, j] > 0.5 else "black"
                ax.text(j, i, f"{props[i, j]:.2f}\n{matrix[i, j]}", ha="center", va="center",
                        fontsize=6, color=color)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_piano_roll(
    likelihoods: np.ndarray,
    path: str | Path,
    truth: np.ndarray | None = None,
    threshold: float = 0.5,
    title: str = "",
) -> Path:
    """Likelihoods per class over time; ground truth (if given) in a second panel."""
    likelihoods = np.asarray(likelihoods)
    n_panels = 2 if truth is not None else 1
    seconds = likelihoods.shape[1] * HOP_LENGTH / SAMPLE_RATE
    extent = (0, seconds, -0.5, len(IptClass) - 0.5)
    fig, axes = plt.subplots(n_panels, 1, figsize=(12, 2.2 * n_panels + 0.6), sharex=True, squeeze=False)
    names = [c.short for c in IptClass]

    ax = axes[0, 0]
    ax.imshow(likelihoods, aspect="auto", origin="lower", cmap="magma", vmin=0, vmax=1,
              extent=extent, interpolation="nearest")
    if likelihoods.shape[1] > 1 and likelihoods.min() < threshold <= likelihoods.max():
        # outline the binarized activations
        ax.contour(np.linspace(0, seconds, likelihoods.shape[1]), np.arange(len(IptClass)),
                   likelihoods, levels=[threshold], colors="cyan", linewidths=0.5)
    ax.set_yticks(range(len(names)), names)
    ax.set_title(title or "predicted likelihoods")
    if truth is not None:
        ax = axes[1, 0]
        ax.imshow(np.asarray(truth), aspect="auto", origin="lower", cmap="Greys", vmin=0, vmax=1,
                  extent=extent, interpolation="nearest")
        ax.set_yticks(range(len(names)), names)
        ax.set_title("ground truth")
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
