"""Landmark-driven dynamic re-weighting of trajectory conditioning.

A per-pixel weight matrix starts at all ones. Each refresh compares
reference landmarks against landmarks predicted from the latest sampled
frame, takes the squared Euclidean distance per point, and writes
1 + loss at each reference landmark's nearest pixel, resetting everything
else back to 1 (weights are recomputed from the latest losses, not
accumulated, so they stay interpretable). Pooled to the token grid, the
weights scale the trajectory tokens the next loss evaluations see;
no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import trajectory as traj


def init_weights(height: int, width: int) -> np.ndarray:
    """All-ones weight matrix: every trajectory token counts equally."""
    if height < 1 or width < 1:
        raise ValueError("weight matrix dimensions must be positive")
    return np.ones((height, width), dtype=np.float64)


@dataclass
class LandmarkLossField:
    losses: np.ndarray      # (P,) squared distances, >= 0
    coords: np.ndarray      # (P, 2) reference (x, y) the losses attach to


def landmark_loss(reference: np.ndarray, predicted: np.ndarray) -> LandmarkLossField:
    """Per-landmark squared Euclidean distance, attached at the reference
    point's coordinates."""
    ref = np.asarray(reference, dtype=np.float64)
    pred = np.asarray(predicted, dtype=np.float64)
    if ref.shape != pred.shape or ref.ndim != 2 or ref.shape[1] != 2:
        raise ValueError(f"landmark sets must both be (P, 2); got {ref.shape} "
                         f"and {pred.shape}")
    d = ref - pred
    return LandmarkLossField(losses=(d * d).sum(axis=1), coords=ref.copy())


def update_weights(shape: tuple[int, int], field: LandmarkLossField) -> np.ndarray:
    """Fresh weight matrix with 1 + loss at each landmark's nearest pixel.

    Landmarks colliding on one pixel keep the larger weight.
    """
    height, width = shape
    w = init_weights(height, width)
    px = np.clip(np.rint(field.coords[:, 0]), 0, width - 1).astype(int)
    py = np.clip(np.rint(field.coords[:, 1]), 0, height - 1).astype(int)
    for x, y, loss in zip(px, py, field.losses):
        w[y, x] = max(w[y, x], 1.0 + loss)
    return w


def dram_step(shape: tuple[int, int], grid: int, reference: np.ndarray,
              predicted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One re-weighting refresh: landmark losses -> weight matrix -> pooled
    per-token weights for the next training evaluations."""
    field = landmark_loss(reference, predicted)
    w = update_weights(shape, field)
    return w, traj.pool_weight_matrix(w, grid)
