"""Figures written next to the TSV reports."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset_prep import write_image  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

GRID_ORDER = ("x", "x_clean", "x_recon", "y", "y_noisy")


def save_sample_grid(bundle, path, max_rows: int = 4) -> Path:
    """Tile ``noisy | x_clean | x_recon | y | y_noisy`` per sample into one PNG."""
    imgs = bundle.images()
    rows = []
    for i in range(min(max_rows, imgs["x"].shape[0])):
        tiles = [imgs[k][i, 0].detach().cpu().numpy() for k in GRID_ORDER]
        sep = np.ones((tiles[0].shape[0], 2), dtype=np.float32)
        row = []
        for t in tiles:
            row += [t, sep]
        rows.append(np.concatenate(row[:-1], axis=1))
        rows.append(np.ones((2, rows[-1].shape[1]), dtype=np.float32))
    grid = np.concatenate(rows[:-1], axis=0)
    write_image(path, grid)
    return Path(path)


def plot_training_log(log_path, out_path) -> Path:
    with open(log_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    steps = np.array([int(r["step"]) for r in rows])
    fig, (ax_g, ax_d) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("cycle", "recon", "adv_clean_g", "adv_noisy_g", "noise_g", "kl", "total_G"):
        vals = np.array([float(r[key]) for r in rows])
        if np.isfinite(vals).any():
            ax_g.plot(steps, _smooth(vals), label=key, lw=1)
    for key in ("adv_clean_d", "adv_noisy_d", "noise_d", "total_D"):
        vals = np.array([float(r[key]) for r in rows])
        if np.isfinite(vals).any():
            ax_d.plot(steps, _smooth(vals), label=key, lw=1)
    ax_g.set_yscale("log")
    ax_g.set_title("encoder / generator terms")
    ax_d.set_title("discriminator terms")
    for ax in (ax_g, ax_d):
        ax.set_xlabel("step")
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def _smooth(vals, k: int = 25):
    if len(vals) < k:
        return vals
    kernel = np.ones(k) / k
    return np.convolve(np.nan_to_num(vals), kernel, mode="same")


def plot_metric_table(means: Mapping[str, Mapping[str, float]], out_path, title: str = "") -> Path:
    """One bar panel per metric, one bar per method (or variant)."""
    methods = list(means)
    columns = ("CNR", "MSR", "EPI", "ENL")
    fig, axes = plt.subplots(1, 4, figsize=(11, 3))
    for ax, col in zip(axes, columns):
        vals = [means[m].get(col) for m in methods]
        heights = [v if v is not None else 0.0 for v in vals]
        bars = ax.bar(range(len(methods)), heights, color="0.55")
        for b, v in zip(bars, vals):
            if v is None:
                b.set_hatch("//")
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=35, ha="right", fontsize=7)
        ax.set_title(col)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def save_comparison_strip(images: Mapping[str, np.ndarray], out_path) -> Path:
    names = list(images)
    fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names), 2), squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.imshow(images[name], cmap="gray", vmin=0, vmax=1)
        ax.set_title(name)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)
