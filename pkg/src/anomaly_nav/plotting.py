"""PNG figures written next to the CSV outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.png")
    fig.savefig(tmp, dpi=110, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_roc(curves: Mapping[str, object], path, fpr_mark: float | None = 0.05) -> Path:
    """``curves`` maps a legend label to a ``RocCurve``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    for label, c in curves.items():
        ax.plot(c.fpr, c.tpr, lw=1.5, label=f"{label} ({c.area():.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls=":")
    if fpr_mark is not None:
        ax.axvline(fpr_mark, color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("anomalous accepted as safe (FPR)")
    ax.set_ylabel("safe accepted (TPR)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(fontsize=7, loc="lower right")
    return _save(fig, path)


def plot_training(reports: Mapping[str, Sequence[float]], path, ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, losses in reports.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, lw=1.3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if len(reports) > 1:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_mask(rgb: np.ndarray | None, score_image: np.ndarray, binary: np.ndarray | None, path) -> Path:
    """Score heat map over the colour image, anomalous pixels outlined."""
    fig, ax = plt.subplots(figsize=(6, 6 * score_image.shape[0] / max(score_image.shape[1], 1) + 0.3))
    finite = score_image[np.isfinite(score_image)]
    lo, hi = np.percentile(finite, [2, 98]) if finite.size else (0.0, 1.0)
    kw = dict(cmap="inferno", vmin=lo, vmax=hi if hi > lo else lo + 1e-9)
    if rgb is not None:
        ax.imshow(np.clip(rgb, 0, 1))
        im = ax.imshow(score_image, alpha=0.55, **kw)
    else:
        im = ax.imshow(score_image, **kw)
    if binary is not None and binary.any() and not binary.all():
        ax.contour(binary.astype(float), levels=[0.5], colors="cyan", linewidths=0.8)
    fig.colorbar(im, ax=ax, fraction=0.03, label="score")
    ax.set_axis_off()
    return _save(fig, path)


def plot_grid(grid, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ny, nx = grid.score.shape
    x0, y0 = grid.origin
    extent = (x0, x0 + nx * grid.cell_size, y0, y0 + ny * grid.cell_size)
    data = np.ma.masked_invalid(grid.score)
    cmap = plt.get_cmap("magma").copy()
    cmap.set_bad("0.85")
    im = ax.imshow(data, origin="lower", extent=extent, cmap=cmap, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.04, label=f"{grid.aggregation} score")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_matrix(cells, path) -> Path:
    """Heat map of mean AUROC, modality rows x (method, regime) columns."""
    rows = list(dict.fromkeys(c.modality for c in cells))
    cols = list(dict.fromkeys((c.method, c.regime) for c in cells))
    grid = np.full((len(rows), len(cols)), np.nan)
    for c in cells:
        grid[rows.index(c.modality), cols.index((c.method, c.regime))] = np.mean(c.aurocs)
    fig, ax = plt.subplots(figsize=(1.1 * len(cols) + 2, 0.45 * len(rows) + 1.5))
    im = ax.imshow(grid, cmap="RdYlGn", vmin=0.0, vmax=1.0, aspect="auto")
    for i in range(len(rows)):
        for j in range(len(cols)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=7)
    ax.set_yticks(range(len(rows)), rows, fontsize=8)
    ax.set_xticks(range(len(cols)), [f"{m}\n{r}" for m, r in cols], fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.03, label="AUROC")
    return _save(fig, path)
