"""Static PNG renders of height maps, signed error maps and the bin ablation curve."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HEIGHT_CMAP = "viridis"
ERROR_CMAP = "RdBu_r"


def save_height_png(path, heights: np.ndarray, vmin: float, vmax: float, title: str = "height (m)"):
    fig, ax = plt.subplots(figsize=(6, 5), dpi=100)
    im = ax.imshow(np.ma.masked_invalid(heights), cmap=HEIGHT_CMAP, vmin=vmin, vmax=vmax)
    ax.set_title(title)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="m")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_error_png(path, error: np.ndarray, title: str = "prediction - ground truth (m)"):
    finite = error[np.isfinite(error)]
    lim = float(np.max(np.abs(finite))) if finite.size else 1.0
    lim = lim or 1.0
    fig, ax = plt.subplots(figsize=(6, 5), dpi=100)
    im = ax.imshow(np.ma.masked_invalid(error), cmap=ERROR_CMAP, vmin=-lim, vmax=lim)
    ax.set_title(title)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="m")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_ablation_png(path, rows: list[dict]):
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for kind, marker in (("fixed", "s"), ("adaptive", "o")):
        pts = sorted((r["n_bins"], r["rel"]) for r in rows if r["type"] == kind)
        if pts:
            ax.plot(*zip(*pts), marker=marker, label=kind)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("N (number of height values)")
    ax.set_ylabel("Rel")
    ax.legend()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
