"""Matplotlib figures written next to the CSV outputs of the CLI."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def benchmark_bars(measured, reference, path, title="PSNR / SSIM"):
    """``measured`` and ``reference`` are lists of ``(method, psnr, ssim)``."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    groups = [("measured", measured, "tab:blue"), ("published", reference, "tab:gray")]
    for ax, col, label in ((axes[0], 1, "PSNR (dB)"), (axes[1], 2, "SSIM")):
        names, vals, colors = [], [], []
        for tag, rows, color in groups:
            for row in rows:
                names.append(f"{row[0]}\n({tag})")
                vals.append(row[col])
                colors.append(color)
        ax.barh(np.arange(len(vals)), vals, color=colors)
        ax.set_yticks(np.arange(len(vals)), names, fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel(label)
    fig.suptitle(title)
    return _save(fig, path)


def noise_sweep(rows, path, baseline=None):
    """``rows``: ``(kind, strength, psnr, ssim)``."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    kinds = sorted({r[0] for r in rows})
    for kind in kinds:
        pts = sorted((r[1], r[2], r[3]) for r in rows if r[0] == kind)
        s = [p[0] for p in pts]
        axes[0].plot(s, [p[1] for p in pts], marker="o", label=kind)
        axes[1].plot(s, [p[2] for p in pts], marker="o", label=kind)
    if baseline is not None:
        axes[0].axhline(baseline[0], color="k", ls="--", lw=0.8, label="noiseless")
        axes[1].axhline(baseline[1], color="k", ls="--", lw=0.8)
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].set_ylabel("SSIM")
    for ax in axes:
        ax.set_xlabel("channel strength")
    axes[0].legend(fontsize=8)
    return _save(fig, path)


def scaling_sweep(rows, path):
    """``rows``: ``(dim, psnr)``.  Only measured points are drawn."""
    fig, ax = plt.subplots(figsize=(5, 4))
    dims = [r[0] for r in rows]
    ax.plot(dims, [r[1] for r in rows], marker="o")
    ax.set_xticks(dims)
    ax.set_xlabel("embedding dimension (qubits)")
    ax.set_ylabel("PSNR (dB)")
    return _save(fig, path)


def dcor_curve(dcor_by_k, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ks = [k for k, _ in dcor_by_k]
    ax.plot(ks, [v for _, v in dcor_by_k], marker="o")
    ax.set_xlabel("neighbourhood size k")
    ax.set_ylabel("distance correlation")
    ax.set_ylim(0, 1)
    return _save(fig, path)


def loss_curve(losses, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    return _save(fig, path)


def image_grid(rows, labels, path):
    """``rows`` is a list of image lists (one row per example), columns share ``labels``."""
    n_rows, n_cols = len(rows), len(labels)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.6 * n_rows), squeeze=False)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            ax = axes[i][j]
            img = np.asarray(img)
            ax.imshow(img[..., 0] if img.ndim == 3 and img.shape[-1] == 1 else img,
                      cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(labels[j], fontsize=8)
    return _save(fig, path)
