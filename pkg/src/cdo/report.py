"""Report artifacts: DD histograms, training curves, and heatmap triptychs."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Sample, resize_mask
from .metrics import dd_stats
from .scoring import AnomalyMap
from .training import EpochLog


@dataclasses.dataclass
class ReportBundle:
    """Paths of every emitted artifact; all must exist on disk."""

    metrics_json: Path
    dd_plot: Path
    curves_plot: Path
    heatmaps: list[Path]

    def verify(self) -> None:
        missing = [
            p
            for p in [self.metrics_json, self.dd_plot, self.curves_plot, *self.heatmaps]
            if not Path(p).exists()
        ]
        if missing:
            raise FileNotFoundError(f"report artifacts missing: {missing}")


def plot_dd_histograms(
    d_normal: np.ndarray,
    d_abnormal: np.ndarray,
    path: Path | str,
    n_bins: int = 100,
) -> Path:
    """Overlaid normal/abnormal discrepancy histograms on shared bin edges."""
    stats = dd_stats(d_normal, d_abnormal, n_bins=n_bins)
    centers = (stats.bin_edges[:-1] + stats.bin_edges[1:]) / 2
    width = stats.bin_edges[1] - stats.bin_edges[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, stats.hist_n, width=width, alpha=0.6, label="normal")
    ax.bar(centers, stats.hist_a, width=width, alpha=0.6, label="abnormal")
    ax.set_xlabel("discrepancy")
    ax.set_ylabel("density")
    ax.set_title(
        f"margin={stats.margin:.4f}  overlap={stats.overlap:.4f}"
    )
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_epoch_curves(logs: Sequence[EpochLog], path: Path | str) -> Path:
    """Per-epoch mean discrepancies of the normal and synthetic-abnormal sets."""
    epochs = [log.epoch for log in logs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [log.mu_n for log in logs], label="mu_n (normal)")
    ax.plot(epochs, [log.mu_s for log in logs], label="mu_s (synthetic abnormal)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean discrepancy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_triptych(
    sample: Sample, amap: AnomalyMap, path: Path | str, resolution: int
) -> Path:
    """Input image, ground-truth mask, and anomaly map side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(np.clip(sample.image, 0, 1))
    axes[0].set_title("input")
    if sample.mask is not None:
        axes[1].imshow(resize_mask(sample.mask, resolution), cmap="gray", vmin=0, vmax=1)
    else:
        axes[1].imshow(np.zeros((resolution, resolution)), cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("ground truth")
    im = axes[2].imshow(amap.scores, cmap="jet")
    axes[2].set_title("anomaly map")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
