"""Report plumbing: JSON schemas shipped with the package and the figure
renderers that accompany delimited outputs on every reporting path."""

from __future__ import annotations

import csv
import json
from importlib import resources

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load_schema(name: str) -> dict:
    with resources.files("gsir.schemas").joinpath(f"{name}.schema.json").open("r") as fh:
        return json.load(fh)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def quality_heatmap_figure(path, psnr_map: np.ndarray, ssim_map: np.ndarray) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    im0 = axes[0].imshow(psnr_map, cmap="viridis")
    axes[0].set_title("patch PSNR (dB)")
    fig.colorbar(im0, ax=axes[0], fraction=0.046)
    im1 = axes[1].imshow(ssim_map, cmap="magma", vmin=0.0, vmax=1.0)
    axes[1].set_title("patch SSIM")
    fig.colorbar(im1, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stage_progress_figure(path, stage_rows: list[dict]) -> None:
    stages = [row["stage"] for row in stage_rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(stages, [row["psnr"] for row in stage_rows], "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel("stage")
    ax1.set_ylabel("PSNR (dB)", color="tab:blue")
    ax1.set_xticks(stages)
    ax2 = ax1.twinx()
    ax2.bar(stages, [row["total"] for row in stage_rows], alpha=0.25, color="tab:orange", label="primitives")
    ax2.set_ylabel("accumulated primitives", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curves_figure(path, curves: dict[str, tuple[np.ndarray, np.ndarray]],
                       xlabel: str = "step", ylabel: str = "loss", logy: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, label=label, linewidth=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bar_comparison_figure(path, labels: list[str], values: list[float], ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color="tab:blue", alpha=0.8)
    ax.set_ylabel(ylabel)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def density_figure(path, counts: np.ndarray, profile_row: int | None = None) -> None:
    if profile_row is None:
        profile_row = counts.shape[0] // 2
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(5.5, 6), height_ratios=[3, 1])
    im = ax0.imshow(counts, cmap="inferno")
    ax0.axhline(profile_row, linestyle="--", color="cyan", linewidth=1)
    fig.colorbar(im, ax=ax0, fraction=0.046)
    ax0.set_title("primitive density")
    ax1.plot(counts[profile_row], drawstyle="steps-mid")
    ax1.set_xlabel("cell")
    ax1.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
