"""PNG figures written next to the delimited report files."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GROUP_LABELS = {"miou_initial": "initial", "miou_incremental": "incremental", "miou_all": "all"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(records: Sequence[Mapping], path) -> Path:
    """Total loss per iteration, one line per step."""
    per_step = defaultdict(list)
    for r in records:
        if r.get("kind") == "iter":
            per_step[r["step"]].append(r["loss_total"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for step in sorted(per_step):
        ys = per_step[step]
        ax.plot(np.arange(offset, offset + len(ys)), ys, lw=0.8, label=f"step {step}")
        offset += len(ys)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    if per_step:
        ax.legend(fontsize=7)
    return _save(fig, path)


def miou_by_step(rows: Sequence[Mapping], path) -> Path:
    """Grouped mIoU after each step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    for key, label in GROUP_LABELS.items():
        ys = [r.get(key) for r in rows]
        xs = [s for s, y in zip(steps, ys) if y is not None]
        ax.plot(xs, [y for y in ys if y is not None], marker="o", label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.set_xticks(steps)
    ax.legend(fontsize=7)
    return _save(fig, path)


def ablation_bars(table: Sequence[Mapping], path) -> Path:
    """Mean grouped mIoU per variant."""
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(table) + 2), 3.8))
    x = np.arange(len(table))
    width = 0.27
    for k, (key, label) in enumerate(GROUP_LABELS.items()):
        vals = [row.get(key) if row.get(key) is not None else 0.0 for row in table]
        ax.bar(x + (k - 1) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels([row["variant"] for row in table], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean mIoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    return _save(fig, path)


def logit_panels(grids: Mapping[str, np.ndarray], path) -> Path:
    """One heatmap per named grid, each with its own colour scale."""
    names = list(grids)
    cols = min(4, len(names))
    rows = -(-len(names) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, name in zip(axes.flat, names):
        im = ax.imshow(grids[name], cmap="viridis")
        ax.set_title(name, fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)
