"""Figures rendered next to the CSV reports (Agg backend, deterministic PNGs)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    # no Software/date stamp: identical inputs give identical files
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(rows: Sequence[dict], path) -> Path:
    """Contrastive losses, penalties and temperature against step."""
    steps = np.array([int(r["step"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        for key in ("l_t2i", "l_i2t", "total"):
            ax1.plot(steps, [float(r[key]) for r in rows], label=key)
        ax1.set_xlabel("step")
        ax1.set_ylabel("loss")
        ax1.legend()
        for key in ("overuse_img", "overuse_txt", "flops_img", "flops_txt"):
            ax2.plot(steps, [float(r[key]) for r in rows], label=key)
        ax2.set_yscale("log")
        ax2.set_xlabel("step")
        ax2.set_ylabel("penalty (unweighted)")
        ax2.legend(fontsize=7)
        return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    """R@K against sparsity ratio, one panel per direction."""
    directions = sorted({r["direction"] for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(directions), figsize=(4.0 * len(directions), 3.0), squeeze=False)
        for ax, direction in zip(axes[0], directions):
            sel = [r for r in rows if r["direction"] == direction]
            ratios = [float(r["ratio"]) for r in sel]
            for key, marker in (("R1", "o"), ("R5", "s"), ("R10", "^")):
                ax.plot(ratios, [float(r[key]) for r in sel], marker=marker, ms=3, label=f"R@{key[1:]}")
            ax.set_title(direction)
            ax.set_xlabel("sparsity ratio")
            ax.set_ylim(0, 1.02)
        axes[0][0].set_ylabel("recall")
        axes[0][-1].legend()
        return _save(fig, path)


def plot_concentration(share_a: np.ndarray, share_b: np.ndarray, labels: tuple[str, str], path) -> Path:
    """Normalized per-token mean activation, sorted descending, for two checkpoints."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for share, label in ((share_a, labels[0]), (share_b, labels[1])):
            ranked = np.sort(np.asarray(share))[::-1] * share.size
            ax.plot(np.arange(1, ranked.size + 1), ranked, label=f"{label} (max {ranked[0]:.2f})")
        ax.axhline(1.0, color="0.6", lw=0.6, ls="--")
        ax.set_xscale("log")
        ax.set_xlabel("token rank")
        ax.set_ylabel("column mean share x V")
        ax.legend()
        return _save(fig, path)


def plot_patchdis(class_iou: dict, random_miou: float, miou: float, path) -> Path:
    classes = sorted(class_iou)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar([str(c) for c in classes], [class_iou[c] for c in classes], color="0.35", width=0.6)
        ax.axhline(random_miou, color="tab:red", ls="--", lw=0.8, label=f"random {random_miou:.3f}")
        ax.axhline(miou, color="tab:blue", lw=0.8, label=f"mIoU {miou:.3f}")
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("class")
        ax.set_ylabel("IoU")
        ax.legend()
        return _save(fig, path)


def plot_lexical(samples: Sequence[tuple[str, list[tuple[str, float]]]], path) -> Path:
    """Ranked token bars per sample: the data a word cloud would draw."""
    n = max(1, len(samples))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1, figsize=(5.0, 1.6 * n), squeeze=False)
        for ax, (title, pairs) in zip(axes[:, 0], samples):
            names = [t for t, _ in pairs][::-1]
            vals = [v for _, v in pairs][::-1]
            ax.barh(names, vals, color="0.35")
            ax.set_title(title, fontsize=8, loc="left")
            ax.tick_params(labelsize=6)
        axes[-1, 0].set_xlabel("lexical value")
        return _save(fig, path)
