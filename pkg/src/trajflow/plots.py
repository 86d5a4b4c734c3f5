"""Figure rendering for the report paths (always written next to the CSVs)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(losses, path, window: int = 100) -> None:
    from .flowmatch import smoothed

    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if losses.size:
        ax.plot(np.arange(1, losses.size + 1), losses, lw=0.6, alpha=0.4,
                label="per step")
        ax.plot(np.arange(1, losses.size + 1), smoothed(losses, window),
                lw=1.6, label=f"window-{window} mean")
        ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_consistency_series(reference, edited, path,
                            labels=("reference", "edited")) -> None:
    ref = np.asarray(reference, dtype=np.float64)
    ed = np.asarray(edited, dtype=np.float64)
    pairs = np.arange(1, ref.size + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(pairs, ref, "o-", label=labels[0])
    ax.plot(pairs, ed, "s-", label=labels[1])
    ax.fill_between(pairs, ref, ed, alpha=0.15)
    ax.set_xlabel("frame pair")
    ax.set_ylabel("mean flow magnitude (px)")
    ax.set_xticks(pairs)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_frame_gallery(rows: dict[str, np.ndarray], path) -> None:
    """Rows of frames, one labeled row per array of shape (K, H, W)."""
    names = list(rows)
    count = max(r.shape[0] for r in rows.values())
    fig, axes = plt.subplots(len(names), count,
                             figsize=(1.1 * count, 1.25 * len(names)),
                             squeeze=False)
    for r, name in enumerate(names):
        frames = rows[name]
        for c in range(count):
            ax = axes[r][c]
            ax.set_axis_off()
            if c < frames.shape[0]:
                ax.imshow(frames[c], cmap="gray", vmin=0.0, vmax=1.0,
                          interpolation="nearest")
        axes[r][0].set_axis_on()
        axes[r][0].set_xticks([])
        axes[r][0].set_yticks([])
        axes[r][0].set_ylabel(name, fontsize=7)
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=130)
    plt.close(fig)
