"""Figure rendering for reports: training curves, FID tables, CAM
overlays, and ablation bars. All figures go to files (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .augment import AblationReport
from .fid import FidTable


def save_training_curves(curves: dict[str, list[tuple[int, float]]],
                         path: str | Path) -> None:
    """Domain-FID vs step, one line per run (e.g. standard vs conditional)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        steps, fids = zip(*curve)
        ax.plot(steps, fids, marker="o", markersize=3, label=name)
    ax.set_xlabel("training step")
    ax.set_ylabel("domain FID")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_fid_table_figure(table: FidTable, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(table.rows) + 1.5))
    names = [row.name for row in table.rows]
    values = [row.fid for row in table.rows]
    ax.barh(names, values, color="steelblue")
    ax.invert_yaxis()
    ax.set_xlabel(f"domain FID vs {table.reference_name}")
    ax.set_title(f"extractor {table.extractor_hash}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_patch_grid(patches: np.ndarray, path: str | Path,
                    ncols: int = 8, titles: list[str] | None = None) -> None:
    """Grayscale grid of channel 0 of each patch."""
    n = len(patches)
    ncols = min(ncols, max(n, 1))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols,
                             figsize=(1.4 * ncols, 1.4 * nrows))
    axes = np.atleast_1d(axes).ravel()
    for i, ax in enumerate(axes):
        ax.axis("off")
        if i < n:
            img = patches[i][0] if patches[i].ndim == 3 else patches[i]
            ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
            if titles:
                ax.set_title(titles[i], fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_cam_overlay(patch: np.ndarray, cam: np.ndarray,
                     path: str | Path) -> None:
    img = patch[0] if patch.ndim == 3 else patch
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(img, cmap="gray", vmin=-1, vmax=1)
    axes[0].set_title("patch")
    axes[1].imshow(img, cmap="gray", vmin=-1, vmax=1)
    axes[1].imshow(cam, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    axes[1].set_title("class activation map")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_figure(report: AblationReport, path: str | Path) -> None:
    rows = [r for r in report.rows if r.error is None]
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(rows))
    width = 0.27
    for offset, metric, label in (
            (-width, "accuracy", "accuracy"),
            (0.0, "sensitivity", "sensitivity"),
            (width, "precision", "precision")):
        means = [getattr(r, f"mean_{metric}") for r in rows]
        sds = [getattr(r, f"sd_{metric}") for r in rows]
        ax.bar(x + offset, means, width, yerr=sds, capsize=3, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels([r.kind for r in rows], rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
