"""Report rendering: CSV/text summaries and matplotlib figures.

Figures always land next to the delimited output so a run directory is
self-contained; the Agg backend keeps everything headless.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _ensure_dir(path: str) -> None:
    if path:
        os.makedirs(path, exist_ok=True)


def write_train_log(log, csv_path: str) -> None:
    _ensure_dir(os.path.dirname(csv_path))
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["epoch", "lr", "pbce", "id", "total", "seconds"])
        for r in log.records:
            writer.writerow([r.epoch, f"{r.lr:.6g}", f"{r.pbce:.8f}",
                             f"{r.id:.8f}", f"{r.total:.8f}", f"{r.seconds:.3f}"])


def plot_train_log(log, png_path: str) -> None:
    _ensure_dir(os.path.dirname(png_path))
    epochs = [r.epoch for r in log.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.total for r in log.records], label="total", lw=1.8)
    ax.plot(epochs, [r.pbce for r in log.records], label="pair bce", lw=1.2)
    ax.plot(epochs, [r.id for r in log.records], label="identity", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def write_eval_report(result, mode: str, out_dir: str, stem: str = "eval") -> dict:
    """Write summary text, the CMC curve CSV, and the CMC figure.

    Returns the paths written, keyed by kind.
    """
    _ensure_dir(out_dir)
    txt_path = os.path.join(out_dir, f"{stem}_{mode}.txt")
    csv_path = os.path.join(out_dir, f"{stem}_{mode}_cmc.csv")
    png_path = os.path.join(out_dir, f"{stem}_{mode}_cmc.png")
    cmc = result.cmc

    def at(rank: int) -> float:
        return float(cmc[min(rank, len(cmc)) - 1])

    with open(txt_path, "w", encoding="utf-8") as fp:
        fp.write(f"mode: {mode}\n")
        fp.write(f"queries x gallery: {result.scores.values.shape[0]} x "
                 f"{result.scores.values.shape[1]}\n")
        fp.write(f"cmc-1: {at(1):.4f}\n")
        fp.write(f"cmc-5: {at(5):.4f}\n")
        fp.write(f"cmc-10: {at(10):.4f}\n")
        fp.write(f"map: {result.map:.4f}\n")
        fp.write(f"backbone_evals: {result.backbone_evals}\n")
        fp.write(f"ccn_evals: {result.ccn_evals}\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["rank", "cmc"])
        for k, v in enumerate(cmc, start=1):
            writer.writerow([k, f"{v:.8f}"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(cmc) + 1), cmc, lw=1.8)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"cmc curve ({mode} mode)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"txt": txt_path, "csv": csv_path, "png": png_path}


def write_pgm(path: str, values: np.ndarray) -> None:
    """8-bit binary PGM, normalized to the array's own min/max."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"pgm needs a 2-d array, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((arr - lo) / span * 255).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fp.write(scaled.tobytes())


def write_contrast_dump(feature: np.ndarray, out_dir: str,
                        stem: str = "contrast") -> list:
    """Per-channel CSV grids and PGM images, plus one PNG panel.

    `feature` is the (n_kernels, h, w) contrastive response of one pair.
    """
    _ensure_dir(out_dir)
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3:
        raise ValueError(f"expected (channels, h, w), got shape {feature.shape}")
    written = []
    for k in range(feature.shape[0]):
        csv_path = os.path.join(out_dir, f"{stem}_ch{k:02d}.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            for row in feature[k]:
                writer.writerow([f"{v:.8f}" for v in row])
        pgm_path = os.path.join(out_dir, f"{stem}_ch{k:02d}.pgm")
        write_pgm(pgm_path, feature[k])
        written += [csv_path, pgm_path]
    n = feature.shape[0]
    cols = min(n, 6)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.4 * rows),
                             squeeze=False)
    for k in range(rows * cols):
        ax = axes[k // cols][k % cols]
        if k < n:
            ax.imshow(feature[k], cmap="magma")
            ax.set_title(f"ch {k}", fontsize=8)
        ax.axis("off")
    png_path = os.path.join(out_dir, f"{stem}_panel.png")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    written.append(png_path)
    return written
