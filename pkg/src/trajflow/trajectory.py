"""Per-frame pixel motion trajectories and their conditioning tokens.

A frame's trajectory map is the hash-encoding difference between each
pixel's spatio-temporal coordinate at that frame and the same (x, y) at
the first frame; background pixels are zeroed by the foreground mask.
Maps are average-pooled onto a small token grid, and each token carries a
normalized cell-center position plus a scalar weight that the re-weighting
mechanism can raise.

Frames are numbered 1..K to match the file formats; internally the first
frame sits at normalized time 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import hashgrid as hg
from .autodiff import Tensor


def pixel_points(height: int, width: int, frame: int, frame_count: int) -> np.ndarray:
    """Normalized (x, y, time) coordinates of every pixel center, row-major."""
    if frame_count < 2:
        raise ValueError("frame_count must be >= 2")
    if not 1 <= frame <= frame_count:
        raise ValueError(f"frame {frame} outside 1..{frame_count}")
    cols = (np.arange(width) + 0.5) / width
    rows = (np.arange(height) + 0.5) / height
    xg, yg = np.meshgrid(cols, rows)
    tau = (frame - 1) / (frame_count - 1)
    pts = np.empty((height * width, 3), dtype=np.float64)
    pts[:, 0] = xg.reshape(-1)
    pts[:, 1] = yg.reshape(-1)
    pts[:, 2] = tau
    return pts


def build_frame_plans(config: hg.HashGridConfig, height: int, width: int,
                      frame_count: int) -> list[hg.EncodePlan]:
    """Precompute the encode geometry of every frame's pixel grid."""
    return [hg.build_plan(config, pixel_points(height, width, i, frame_count))
            for i in range(1, frame_count + 1)]


@dataclass
class TrajectoryMap:
    features: Tensor          # (H*W, levels*features)
    height: int
    width: int
    frame: int

    def grid(self) -> np.ndarray:
        return self.features.data.reshape(self.height, self.width, -1)


@dataclass
class TrajectoryTokens:
    features: Tensor          # (tokens, levels*features)
    positions: np.ndarray     # (tokens, 2) normalized cell centers (x, y)
    weights: np.ndarray       # (tokens,) scalar weights, >= 0

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def trajectory_map(table: hg.FeatureTable, frame: int, mask: np.ndarray,
                   frame_count: int,
                   plan: hg.EncodePlan | None = None,
                   first_plan: hg.EncodePlan | None = None,
                   first_encoding: Tensor | None = None) -> TrajectoryMap:
    """Encoding difference of frame `frame` against frame 1, masked.

    `plan`/`first_plan` can be passed from `build_frame_plans` to skip
    regeometrizing static pixel grids inside training loops, and a
    `first_encoding` computed once per step can be shared across a batch.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    height, width = mask.shape
    if plan is None:
        plan = hg.build_plan(table.config, pixel_points(height, width, frame, frame_count))
    if first_encoding is None and first_plan is None:
        first_plan = hg.build_plan(table.config, pixel_points(height, width, 1, frame_count))
    if plan.count != height * width or (first_plan is not None
                                        and first_plan.count != height * width):
        raise ValueError(f"mask {mask.shape} does not match plans of "
                         f"{plan.count} points")

    enc_i = hg.encode_with_plan(table, plan)
    enc_1 = first_encoding if first_encoding is not None \
        else hg.encode_with_plan(table, first_plan)
    diff = ad.sub(enc_i, enc_1)
    keep = np.repeat(mask.reshape(-1, 1).astype(np.float64),
                     table.config.feature_dim, axis=1)
    masked = ad.mul(diff, ad.as_tensor(keep))
    return TrajectoryMap(features=masked, height=height, width=width, frame=frame)


@lru_cache(maxsize=16)
def _pooling_matrix(height: int, width: int, grid: int) -> np.ndarray:
    # (grid*grid, height*width) average-pooling operator, row-major tokens
    ch, cw = height // grid, width // grid
    pool = np.zeros((grid * grid, height * width), dtype=np.float64)
    inv = 1.0 / (ch * cw)
    for gy in range(grid):
        for gx in range(grid):
            tok = gy * grid + gx
            for r in range(gy * ch, (gy + 1) * ch):
                pool[tok, r * width + gx * cw:(r * width) + (gx + 1) * cw] = inv
    pool.setflags(write=False)
    return pool


def token_positions(grid: int) -> np.ndarray:
    centers = (np.arange(grid) + 0.5) / grid
    xg, yg = np.meshgrid(centers, centers)
    return np.stack([xg.reshape(-1), yg.reshape(-1)], axis=1)


def downsample_to_tokens(tmap: TrajectoryMap, grid: int) -> TrajectoryTokens:
    """Average-pool the map onto a grid x grid token set, weights all 1."""
    if grid < 1 or tmap.height % grid or tmap.width % grid:
        raise ValueError(f"token grid {grid} does not divide frame "
                         f"{tmap.height}x{tmap.width}")
    pool = _pooling_matrix(tmap.height, tmap.width, grid)
    feats = ad.matmul(ad.as_tensor(pool), tmap.features)
    return TrajectoryTokens(features=feats, positions=token_positions(grid),
                            weights=np.ones(grid * grid, dtype=np.float64))


def apply_token_weights(tokens: TrajectoryTokens, weights: np.ndarray) -> TrajectoryTokens:
    """Scale each token's trajectory feature by its scalar weight.

    Weights are constants for gradient purposes; positions pass through.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (tokens.count,):
        raise ValueError(f"expected {tokens.count} weights, got shape {weights.shape}")
    if weights.min(initial=0.0) < 0.0:
        raise ValueError("token weights must be nonnegative")
    cols = tokens.features.shape[1]
    tiled = np.repeat(weights.reshape(-1, 1), cols, axis=1)
    scaled = ad.mul(tokens.features, ad.as_tensor(tiled))
    return TrajectoryTokens(features=scaled, positions=tokens.positions,
                            weights=weights.copy())


def pool_weight_matrix(weight_matrix: np.ndarray, grid: int) -> np.ndarray:
    """Mean-pool an HxW weight matrix to per-token scalars."""
    w = np.asarray(weight_matrix, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] % grid or w.shape[1] % grid:
        raise ValueError(f"weight matrix {w.shape} not divisible by grid {grid}")
    ch, cw = w.shape[0] // grid, w.shape[1] // grid
    return w.reshape(grid, ch, grid, cw).mean(axis=(1, 3)).reshape(-1)
