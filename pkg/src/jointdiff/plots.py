"""Figure rendering for the report path. Figures are written to files next
to the delimited tables; nothing here is load-bearing for metrics."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = image.detach().float().clamp(-1, 1).numpy()
    return ((arr.transpose(1, 2, 0) + 1.0) * 127.5).round().astype(np.uint8)


def save_image_png(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path) -> torch.Tensor:
    """PNG/PPM/NPY file -> (3, H, W) float tensor in [-1, 1]."""
    p = str(path)
    if p.endswith(".npy"):
        arr = np.load(p)
        return torch.from_numpy(arr).float()
    img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(img.transpose(2, 0, 1) / 127.5 - 1.0)


def save_image_grid(images: torch.Tensor, path, captions: list[str] | None = None,
                    ncols: int = 5) -> None:
    n = len(images)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.6 * nrows), squeeze=False)
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        ax.axis("off")
        if i < n:
            ax.imshow(to_uint8(images[i]))
            if captions:
                ax.set_title(captions[i], fontsize=6, wrap=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_convergence(rows: list[dict], path) -> None:
    """fid_proxy and mean attribute accuracy vs step, one line per label."""
    labels = sorted({r["label"] for r in rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label in labels:
        pts = sorted((r for r in rows if r["label"] == label), key=lambda r: r["step"])
        steps = [r["step"] for r in pts]
        ax1.plot(steps, [r["fid_proxy"] for r in pts], marker="o", label=label)
        ax2.plot(steps, [r["mean_attr_accuracy"] for r in pts], marker="o", label=label)
    ax1.set_xlabel("training step"); ax1.set_ylabel("fid proxy"); ax1.legend()
    ax2.set_xlabel("training step"); ax2.set_ylabel("mean attribute accuracy"); ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_sweep(rows: list[dict], path) -> None:
    ws = [r["w"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    fid = [r["fid_proxy"] for r in rows]
    if any(v is not None for v in fid):
        ax1.plot(ws, fid, marker="o")
    ax1.set_xlabel("guidance scale w"); ax1.set_ylabel("fid proxy")
    ax2.plot(ws, [r["mean_attr_accuracy"] for r in rows], marker="o")
    ax2.set_xlabel("guidance scale w"); ax2.set_ylabel("mean attribute accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
