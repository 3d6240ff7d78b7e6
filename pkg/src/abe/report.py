"""Report writers: delimited outputs plus matplotlib figures rendered to files.

Every CLI report path writes both machine-readable output (CSV, JSONL, PGM)
and a PNG figure next to it.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import CosineStats, MetricsRecord

_PAIR_COLORS = {"positive": "tab:blue", "negative": "tab:red", "self": "tab:green"}


def write_histogram_csv(path, stats: CosineStats) -> None:
    """Columns bin_left,bin_right,density; densities sum to 1."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "density"])
        for left, right, density in zip(
            stats.bin_edges[:-1], stats.bin_edges[1:], stats.density
        ):
            writer.writerow([f"{left:.6f}", f"{right:.6f}", repr(float(density))])


def read_histogram_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = list(csv.DictReader(open(path, newline="")))
    edges = np.asarray([float(r["bin_left"]) for r in rows] + [float(rows[-1]["bin_right"])])
    density = np.asarray([float(r["density"]) for r in rows])
    return edges, density


def save_histogram_figure(path, stats_by_kind: dict[str, CosineStats]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind, stats in stats_by_kind.items():
        centers = 0.5 * (stats.bin_edges[:-1] + stats.bin_edges[1:])
        ax.plot(centers, stats.density, color=_PAIR_COLORS.get(kind), label=f"{kind} pairs")
        ax.fill_between(centers, stats.density, alpha=0.25, color=_PAIR_COLORS.get(kind))
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("fraction of pairs")
    ax.set_xlim(-1, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_compare_csv(path, rows: list[dict], ks: Sequence[int]) -> None:
    header = ["variant"]
    header += [f"ensemble_recall@{k}" for k in ks]
    header += [f"individual_recall@{k}_mean" for k in ks]
    header += [f"individual_recall@{k}_std" for k in ks]
    header += ["params", "flops"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            out = [row["variant"]]
            out += [repr(row["ensemble"][k]) for k in ks]
            out += [repr(row["individual_mean"][k]) for k in ks]
            out += [repr(row["individual_std"][k]) for k in ks]
            out += [row["params"], row["flops"]]
            writer.writerow(out)


def format_compare_table(rows: list[dict], ks: Sequence[int]) -> str:
    cols = ["variant"] + [f"R@{k}" for k in ks] + [f"ind R@{k}" for k in ks] + ["params", "flops"]
    lines = ["  ".join(f"{c:>12}" for c in cols)]
    for row in rows:
        cells = [row["variant"]]
        cells += [f"{row['ensemble'][k]:.4f}" for k in ks]
        cells += [
            f"{row['individual_mean'][k]:.3f}±{row['individual_std'][k]:.3f}" for k in ks
        ]
        cells += [str(row["params"]), str(row["flops"])]
        lines.append("  ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)


def save_compare_figure(path, rows: list[dict]) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, key, label in ((axes[0], "params", "parameters"), (axes[1], "flops", "MACs / image")):
        for row in rows:
            ax.scatter(row[key], row["ensemble"][1], label=row["variant"])
            ax.annotate(row["variant"], (row[key], row["ensemble"][1]), fontsize=8)
        ax.set_xlabel(label)
        ax.set_ylabel("ensemble Recall@1")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255); pixel = round(255 * value), clipped to [0,255]."""
    if values.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got rank {values.ndim}")
    h, w = values.shape
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def save_mask_montage(path, per_sample: np.ndarray, mean_masks: np.ndarray) -> None:
    """Grid figure: one row per learner, sample masks plus the mean mask."""
    learners, n_samples = per_sample.shape[0], per_sample.shape[1]
    cols = n_samples + 1
    fig, axes = plt.subplots(
        learners, cols, figsize=(1.6 * cols, 1.6 * learners), squeeze=False
    )
    for m in range(learners):
        for s in range(n_samples):
            axes[m][s].imshow(per_sample[m, s], vmin=0, vmax=1, cmap="viridis")
            axes[m][s].set_title(f"L{m} s{s}", fontsize=7)
        axes[m][-1].imshow(mean_masks[m], vmin=0, vmax=1, cmap="magma")
        axes[m][-1].set_title(f"L{m} mean", fontsize=7)
        for ax in axes[m]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(path, records: list[MetricsRecord]) -> None:
    iters = [r.iteration for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(iters, [r.recall["ensemble"][1] for r in records], label="ensemble R@1")
    scopes = sorted(k for k in records[0].recall if k.startswith("learner_"))
    for scope in scopes:
        axes[0].plot(iters, [r.recall[scope][1] for r in records], alpha=0.5, label=scope)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("Recall@1")
    axes[0].legend(fontsize=7)
    axes[1].plot(iters, [r.loss_total for r in records], label="total loss")
    axes[1].plot(iters, [r.loss_divergence for r in records], label="divergence")
    if records[0].cos_self is not None:
        axes[1].plot(iters, [r.cos_self[0] for r in records], label="self cosine mean")
    axes[1].set_xlabel("iteration")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
