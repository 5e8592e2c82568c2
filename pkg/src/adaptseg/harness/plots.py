"""Raster figures: score histograms, per-level grids, random-predictor surfaces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..metrics import RatioPair, expected_random_iou  # noqa: E402
from ..segment import HIST_BINS, threshold  # noqa: E402


def _np(x) -> np.ndarray:
    return x.detach().numpy() if hasattr(x, "detach") else np.asarray(x)


def histogram_data(fused, bins: int = HIST_BINS):
    """Counts, edges, mean and threshold of a fused score map."""
    v = _np(fused).ravel().astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        counts, edges = np.array([v.size]), np.array([lo - 0.5, lo + 0.5])
    else:
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return counts, edges, float(v.mean()), threshold(v)


def plot_histogram(fused, out, title: str | None = None) -> Path:
    counts, edges, mean, thr = histogram_data(fused)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="0.55")
    ax.axvline(mean, color="tab:blue", ls="--", label=f"mean {mean:.3f}")
    ax.axvline(thr, color="tab:red", ls=":", label=f"threshold {thr:.3f}")
    ax.set_xlabel("fused score")
    ax.set_ylabel("pixels")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out)


def plot_level_grid(per_level, fused, mask, out, image=None) -> Path:
    """One panel per level, then the fused map and the binary mask."""
    panels = [(f"level {i + 1}", _np(m)) for i, m in enumerate(per_level)]
    panels += [("fused", _np(fused)), ("mask", _np(mask).astype(float))]
    if image is not None:
        panels.insert(0, ("image", np.asarray(image)))
    cols = min(len(panels), 5)
    rows = -(-len(panels) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (name, arr) in zip(axes.ravel(), panels):
        ax.imshow(arr, cmap=None if arr.ndim == 3 else "viridis", vmin=None if arr.ndim == 3 else 0,
                  vmax=None if arr.ndim == 3 else 1)
        ax.set_title(name, fontsize=9)
    fig.tight_layout()
    return _save(fig, out)


def random_surface(n: int = 50):
    """Expected mIoU and FB-IoU of a Bernoulli predictor on an ``n x n`` ratio grid.

    Rows index the true ratio, columns the predicted ratio; both run over the
    open interval (0, 1).
    """
    grid = (np.arange(n) + 0.5) / n
    miou = np.empty((n, n))
    fb = np.empty((n, n))
    for i, r in enumerate(grid):
        for j, p in enumerate(grid):
            miou[i, j], fb[i, j] = expected_random_iou(RatioPair(r, p))
    return grid, miou, fb


def plot_random_surface(out, n: int = 50) -> Path:
    grid, miou, fb = random_surface(n)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for ax, z, name in zip(axes, (miou, fb), ("mIoU", "FB-IoU")):
        im = ax.imshow(z, origin="lower", extent=(0, 1, 0, 1), vmin=0, vmax=1, cmap="magma")
        ax.contour(grid, grid, z, levels=8, colors="w", linewidths=0.5)
        ax.set_xlabel("predicted foreground ratio")
        ax.set_ylabel("true foreground ratio")
        ax.set_title(f"random predictor {name}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, out)


def plot_embedding_bars(rows, out) -> Path:
    """Bar chart of an embedding table (rows of [scope, measure, block values...])."""
    header, body = rows[0], [r for r in rows[1:] if r[0] != "episodes"]
    cols = header[2:]
    x = np.arange(len(cols))
    width = 0.8 / max(len(body), 1)
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(cols)), 3.5))
    for k, row in enumerate(body):
        vals = [np.nan if v in (None, "") else float(v) for v in row[2:]]
        ax.bar(x + k * width, vals, width, label=f"{row[0]} {row[1]}")
    ax.set_xticks(x + width * (len(body) - 1) / 2, cols, rotation=30, fontsize=8)
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out)


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
