"""Heatmap overlays and report figures.

Overlays blend the grayscale radiograph with a perceptually ordered
colormap of the heatmap at a fixed alpha and are written through PIL, so
identical inputs give identical bytes. Report figures (metric bars,
ablation comparisons, overlay grids) go through matplotlib's Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import colormaps
from PIL import Image

OVERLAY_ALPHA = 0.5
OVERLAY_CMAP = "viridis"


def blend_overlay(
    image: np.ndarray,
    heatmap: np.ndarray,
    alpha: float = OVERLAY_ALPHA,
    cmap: str = OVERLAY_CMAP,
) -> np.ndarray:
    """(H, W, 3) float blend: (1-alpha)*gray + alpha*colormap(heatmap)."""
    image = np.asarray(image, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if image.shape != heatmap.shape:
        raise ValueError(f"image {image.shape} and heatmap {heatmap.shape} disagree")
    gray = np.repeat(image[:, :, None], 3, axis=2)
    colors = colormaps[cmap](np.clip(heatmap, 0.0, 1.0))[:, :, :3]
    return (1.0 - alpha) * gray + alpha * colors


def render_overlay(
    image: np.ndarray,
    heatmap: np.ndarray,
    out_path: str | Path,
    alpha: float = OVERLAY_ALPHA,
    cmap: str = OVERLAY_CMAP,
) -> Path:
    """Write the blended overlay as an 8-bit PNG; deterministic bytes."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    blended = blend_overlay(image, heatmap, alpha, cmap)
    as_u8 = np.rint(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(as_u8, mode="RGB").save(out_path)
    return out_path


def save_metrics_figure(report, out_path: str | Path) -> Path:
    """Bar chart of the aggregate metrics."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    agg = dict(report.aggregates)
    if report.accuracy is not None:
        agg["Accuracy"] = report.accuracy
    fig, ax = plt.subplots(figsize=(7, 3.2))
    names = list(agg)
    values = [agg[k] for k in names]
    ax.bar(names, values, color="#4878a8")
    ax.set_ylabel("value")
    ax.set_title("heatmap and classification metrics")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def save_ablation_figure(
    rows: list[dict], value_columns: list[str], label_column: str, out_path: str | Path,
    title: str,
) -> Path:
    """Grouped bars: one group per row, one bar per metric column."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_rows = len(rows)
    n_cols = len(value_columns)
    x = np.arange(n_rows)
    width = 0.8 / max(n_cols, 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * n_rows, 3.4))
    for j, col in enumerate(value_columns):
        vals = [float(r[col]) for r in rows]
        ax.bar(x + j * width, vals, width, label=col)
    ax.set_xticks(x + width * (n_cols - 1) / 2)
    ax.set_xticklabels([str(r[label_column]) for r in rows])
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def save_overlay_grid(
    panels: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]],
    out_path: str | Path,
) -> Path:
    """Rows of (image, ground truth overlay, prediction overlay) panels."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = len(panels)
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.5 * n), squeeze=False)
    for i, (name, image, gt, pred) in enumerate(panels):
        axes[i][0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[i][0].set_ylabel(name, fontsize=7)
        axes[i][1].imshow(blend_overlay(image, gt))
        axes[i][2].imshow(blend_overlay(image, pred))
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_title("image", fontsize=9)
    axes[0][1].set_title("ground truth", fontsize=9)
    axes[0][2].set_title("predicted", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
