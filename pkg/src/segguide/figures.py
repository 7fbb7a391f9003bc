"""Matplotlib rendering for the report paths: sample grids, metric bars,
loss curves, and ablation rankings. All figures are written to files; no
interactive backend is ever required.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .core import ImageBatch


def _to_display(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy()
    arr = (np.clip(arr, -1.0, 1.0) + 1.0) / 2.0
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def sample_grid(
    path: str | Path,
    source: ImageBatch,
    target: ImageBatch,
    outputs: Mapping[str, ImageBatch],
    index: int,
) -> Path:
    """One row: input | ground truth | one column per variant output."""
    columns = [("input", source.data[index]), ("ground truth", target.data[index])]
    columns += [(label, batch.data[index]) for label, batch in outputs.items()]
    fig, axes = plt.subplots(1, len(columns), figsize=(2.2 * len(columns), 2.5))
    for ax, (label, img) in zip(np.atleast_1d(axes), columns):
        arr = _to_display(img)
        ax.imshow(arr, cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=1)
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def metrics_bar(path: str | Path, labels: Sequence[str], fids: Sequence[float],
                mious: Sequence[float | None] | None = None) -> Path:
    n_panels = 2 if mious is not None and any(m is not None for m in mious) else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(4.2 * n_panels, 3.2))
    axes = np.atleast_1d(axes)
    xs = np.arange(len(labels))
    axes[0].bar(xs, fids, color="#4878d0")
    axes[0].set_xticks(xs, labels, rotation=30, ha="right", fontsize=8)
    axes[0].set_ylabel("FID (lower is better)")
    if n_panels == 2:
        vals = [m if m is not None else 0.0 for m in mious]
        axes[1].bar(xs, vals, color="#6acc64")
        axes[1].set_xticks(xs, labels, rotation=30, ha="right", fontsize=8)
        axes[1].set_ylabel("mIoU (higher is better)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curves(path: str | Path, trace_csv: str | Path) -> Path:
    """Per-epoch mean generator/discriminator totals from a loss trace."""
    epochs: dict[tuple[int, str], list[float]] = {}
    with open(trace_csv) as fh:
        header = fh.readline().strip().split(",")
        idx = {name: i for i, name in enumerate(header)}
        for line in fh:
            parts = line.rstrip("\n").split(",")
            key = (int(parts[idx["epoch"]]), parts[idx["side"]])
            epochs.setdefault(key, []).append(float(parts[idx["total"]]))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for side, color in (("generator", "#d65f5f"), ("discriminator", "#4878d0")):
        xs = sorted(e for e, s in epochs if s == side)
        ys = [float(np.mean(epochs[(e, side)])) for e in xs]
        if xs:
            ax.plot(xs, ys, label=side, color=color)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.legend(fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def ablation_bar(path: str | Path, weights: Sequence[float], fids: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    xs = np.arange(len(weights))
    best = int(np.argmin(fids))
    colors = ["#d65f5f" if i == best else "#4878d0" for i in xs]
    ax.bar(xs, fids, color=colors)
    ax.set_xticks(xs, [str(w) for w in weights])
    ax.set_xlabel("segmentation loss weight")
    ax.set_ylabel("FID")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
