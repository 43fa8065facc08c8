"""Static figures for analysis reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def embedding_scatter(path, embedding: np.ndarray, labels: np.ndarray, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(embedding[:, 0], embedding[:, 1], c=labels, s=6, cmap="tab20", linewidths=0)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def enrichment_bars(path, report, top: int = 20) -> None:
    rows = report.rows[:top]
    ids = [str(r.cluster_id) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(rows) + 2), 4))
    ax.bar(x - 0.2, [r.pct_patients_high_risk for r in rows], 0.4,
           label=f"survival <= {report.threshold_months:g} months (n={report.group_size_high})")
    ax.bar(x + 0.2, [r.pct_patients_low_risk for r in rows], 0.4,
           label=f"survival > {report.threshold_months:g} months (n={report.group_size_low})")
    for i, r in enumerate(rows):
        if r.highlighted:
            ax.annotate("*", (i - 0.2, r.pct_patients_high_risk), ha="center", va="bottom")
    ax.set_xticks(x, ids)
    ax.set_xlabel("cluster")
    ax.set_ylabel("% of patients with patches in cluster")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_strip(path, images: np.ndarray, rows: int = 1) -> None:
    """Tile ``(N, H, W, 3)`` images in [0, 1] into a grid with ``rows`` rows."""
    n = len(images)
    cols = math.ceil(n / rows)
    h, w = images.shape[1:3]
    canvas = np.ones((rows * h + (rows - 1) * 2, cols * w + (cols - 1) * 2, 3), np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * (h + 2): r * (h + 2) + h, c * (w + 2): c * (w + 2) + w] = img
    plt.imsave(path, np.clip(canvas, 0, 1))
