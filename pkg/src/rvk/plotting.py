"""Static report figures.  Rendering goes straight to PNG files through the
Agg backend so nothing here needs a display."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalharness import GROUPS  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(epoch_loss, epoch_lr, path) -> Path:
    epochs = np.arange(1, len(epoch_loss) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(epochs, epoch_loss, color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.semilogy(epochs, epoch_lr, color="tab:gray", ls="--")
    ax2.set_ylabel("learning rate", color="tab:gray")
    return _finish(fig, path)


def velocity_by_group(report: dict, path) -> Path:
    """Bar chart of per-group velocity MSE, both the (z, x) and 3D variants."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(GROUPS))
    for k, (key, label) in enumerate((("velocity_mse_zx", "(z, x)"), ("velocity_mse_3d", "3D"))):
        vals = [report[key][g] if report[key][g] is not None else np.nan for g in GROUPS]
        ax.bar(x + (k - 0.5) * 0.38, vals, width=0.38, label=label)
    ax.set_xticks(x, GROUPS)
    ax.set_ylabel("velocity MSE (m$^2$/s$^2$)")
    ax.legend(frameon=False)
    return _finish(fig, path)


def distance_scatter(gt_d, pred_d, path) -> Path:
    gt_d = np.asarray(gt_d)
    pred_d = np.asarray(pred_d)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(gt_d, pred_d, s=6, alpha=0.6)
    hi = float(max(gt_d.max(initial=1.0), pred_d.max(initial=1.0)))
    ax.plot([0, hi], [0, hi], color="k", lw=0.8)
    ax.set_xlabel("true distance (m)")
    ax.set_ylabel("predicted distance (m)")
    return _finish(fig, path)


def ablation_scatter(rows: list[dict], path) -> Path:
    """EPE improvement of vehicle-centric sampling against crop magnification."""
    mag = np.array([r["magnification"] for r in rows], dtype=float)
    gain = np.array([r["epe_full"] - r["epe_centric"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(mag, gain, s=10)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("crop magnification")
    ax.set_ylabel("EPE full - EPE vehicle-centric (px)")
    return _finish(fig, path)
