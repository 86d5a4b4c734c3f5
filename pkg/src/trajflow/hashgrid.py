"""Multi-resolution 3D hash encoding of (x, y, frame-time) coordinates.

A point in the unit cube is encoded per level by scaling it to that
level's lattice, hashing the 8 surrounding corners into a fixed-size
feature table with an XOR of prime-multiplied coordinates, and blending
the looked-up features trilinearly. Level outputs are concatenated
coarse-to-fine; the tables are trainable and gradients are exact.

Level geometry (corner indices and blend weights) depends only on the
points, so it can be precomputed once per frame as an `EncodePlan` and
reused across training steps while the tables change underneath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor

# hashing constants; first axis deliberately 1 so x-steps walk the table
DEFAULT_PRIMES = (1, 2654435761, 805459861)

_U64_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features: int = 2
    table_size: int = 2 ** 14
    res_min: int = 16
    res_max: int = 512
    primes: tuple[int, int, int] = DEFAULT_PRIMES

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features < 1:
            raise ValueError("features must be >= 1")
        if self.table_size < 2 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two >= 2")
        if not 0 < self.res_min <= self.res_max:
            raise ValueError("need 0 < res_min <= res_max")
        if len(set(self.primes)) != 3:
            raise ValueError("hash primes must be pairwise distinct")

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features

    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.res_max) - math.log(self.res_min))
                        / (self.levels - 1))

    def to_dict(self) -> dict:
        return {"levels": self.levels, "features": self.features,
                "table_size": self.table_size, "res_min": self.res_min,
                "res_max": self.res_max, "primes": list(self.primes)}

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(levels=int(d["levels"]), features=int(d["features"]),
                   table_size=int(d["table_size"]), res_min=int(d["res_min"]),
                   res_max=int(d["res_max"]), primes=tuple(d["primes"]))


def level_resolution(config: HashGridConfig, level: int) -> int:
    """Lattice resolution of one level: floor(res_min * growth**level)."""
    if not 0 <= level < config.levels:
        raise ValueError(f"level {level} out of range for {config.levels} levels")
    if config.levels == 1:
        return config.res_min
    return int(math.floor(config.res_min * config.growth() ** level))


def hash_index(corner: Sequence[int], config: HashGridConfig) -> int:
    """XOR-prime hash of one integer lattice corner, reduced mod table size.

    Products wrap in unsigned 64-bit arithmetic.
    """
    x1, x2, x3 = (int(c) for c in corner)
    if x1 < 0 or x2 < 0 or x3 < 0:
        raise ValueError("corner components must be nonnegative")
    p1, p2, p3 = config.primes
    h = ((x1 * p1) & _U64_MASK) ^ ((x2 * p2) & _U64_MASK) ^ ((x3 * p3) & _U64_MASK)
    return h % config.table_size


def _validate_points(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all() or pts.min(initial=0.0) < 0.0 or pts.max(initial=0.0) > 1.0:
        raise ValueError("point coordinates must lie in [0, 1]")
    return pts


def corner_coords(point: Sequence[float], resolution: int):
    """8 lattice corners of one point plus its trilinear blend weights.

    Corners pair the floor and ceil of each scaled coordinate; on axes
    where the scaled coordinate is integral the pair collapses and the
    degenerate corners carry zero weight, so weights still sum to 1.
    """
    p = _validate_points(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    scaled = p * resolution
    lo = np.floor(scaled).astype(np.int64)
    hi = np.ceil(scaled).astype(np.int64)
    frac = scaled - lo
    corners = np.empty((8, 3), dtype=np.int64)
    weights = np.empty(8, dtype=np.float64)
    for c in range(8):
        w = 1.0
        for axis in range(3):
            if (c >> axis) & 1:
                corners[c, axis] = hi[axis]
                w *= frac[axis]
            else:
                corners[c, axis] = lo[axis]
                w *= 1.0 - frac[axis]
        weights[c] = w
    return corners, weights


@dataclass
class EncodePlan:
    """Frozen lookup geometry for a fixed point set: per level, the hashed
    table row of each of the 8 corners and its trilinear weight."""

    config: HashGridConfig
    count: int
    indices: list[np.ndarray]   # per level (N, 8) int64 rows into the table
    weights: list[np.ndarray]   # per level (N, 8) float64, rows sum to 1

    def _scatter_keys(self):
        # fused (levels, N, 8, features) keys into one flat gradient buffer,
        # built lazily; lets the backward pass run as a single bincount
        if not hasattr(self, "_fused"):
            cfg = self.config
            idx = np.stack(self.indices)                       # (L, N, 8)
            offs = (np.arange(cfg.levels) * cfg.table_size)[:, None, None]
            keys = ((idx + offs) * cfg.features)[..., None] + np.arange(cfg.features)
            self._fused = keys.reshape(-1)
            self._stacked_w = np.stack(self.weights)           # (L, N, 8)
        return self._fused, self._stacked_w


def build_plan(config: HashGridConfig, pts: np.ndarray) -> EncodePlan:
    pts = _validate_points(pts)
    primes = np.array(config.primes, dtype=np.uint64)
    mask = np.uint64(config.table_size - 1)
    indices: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for level in range(config.levels):
        res = level_resolution(config, level)
        scaled = pts * res
        lo = np.floor(scaled)
        hi = np.ceil(scaled)
        frac = scaled - lo
        idx = np.empty((pts.shape[0], 8), dtype=np.int64)
        wgt = np.empty((pts.shape[0], 8), dtype=np.float64)
        for c in range(8):
            sel = np.array([(c >> a) & 1 for a in range(3)], dtype=bool)
            corner = np.where(sel, hi, lo).astype(np.uint64)
            w = np.prod(np.where(sel, frac, 1.0 - frac), axis=1)
            h = (corner[:, 0] * primes[0]) ^ (corner[:, 1] * primes[1]) \
                ^ (corner[:, 2] * primes[2])
            idx[:, c] = (h & mask).astype(np.int64)
            wgt[:, c] = w
        indices.append(idx)
        weights.append(wgt)
    return EncodePlan(config=config, count=pts.shape[0],
                      indices=indices, weights=weights)


class FeatureTable:
    """Trainable per-level feature tables backing the encoder."""

    def __init__(self, config: HashGridConfig, levels: list[Tensor]):
        if len(levels) != config.levels:
            raise ValueError(f"expected {config.levels} level tables, got {len(levels)}")
        for i, lv in enumerate(levels):
            if lv.shape != (config.table_size, config.features):
                raise ValueError(f"level {i} table has shape {lv.shape}, expected "
                                 f"({config.table_size}, {config.features})")
        self.config = config
        self.levels = levels

    @classmethod
    def create(cls, config: HashGridConfig, rng: np.random.Generator,
               init_scale: float = 1e-2) -> "FeatureTable":
        levels = [
            autodiff.parameter(
                rng.uniform(-init_scale, init_scale,
                            size=(config.table_size, config.features)),
                name=f"hash_level{i}")
            for i in range(config.levels)
        ]
        return cls(config, levels)

    def parameters(self) -> list[Tensor]:
        return list(self.levels)

    def arrays(self) -> list[np.ndarray]:
        return [lv.data for lv in self.levels]


def encode_with_plan(table: FeatureTable, plan: EncodePlan) -> Tensor:
    """Differentiable lookup of a precomputed plan: (N, levels*features).

    Blend weights are constants with respect to the table, so the
    gradient of each touched entry is its weight times the upstream
    slice; rows that collide accumulate additively.
    """
    cfg = table.config
    if plan.config != cfg:
        raise ValueError("plan was built for a different hash-grid config")
    feats = np.empty((plan.count, cfg.feature_dim), dtype=np.float64)
    for level in range(cfg.levels):
        data = table.levels[level].data
        autodiff._check_finite("hash_encode", f"level{level}", data)
        gathered = data[plan.indices[level]]                # (N, 8, F)
        blended = np.einsum("ncf,nc->nf", gathered, plan.weights[level])
        feats[:, level * cfg.features:(level + 1) * cfg.features] = blended

    def bwd(up):
        return encode_backward(plan, up)

    return autodiff.apply_op("hash_encode", table.levels, feats, bwd)


def encode(table: FeatureTable, pts: np.ndarray) -> Tensor:
    """Encode points in the unit cube; convenience wrapper over a plan."""
    return encode_with_plan(table, build_plan(table.config, pts))


def encode_backward(plan: EncodePlan, upstream: np.ndarray) -> list[np.ndarray]:
    """Standalone table gradients of `encode` for a given upstream.

    Matches what the tape computes; exposed for direct verification.
    """
    cfg = plan.config
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (plan.count, cfg.feature_dim):
        raise ValueError(f"upstream must have shape ({plan.count}, {cfg.feature_dim})")
    keys, stacked_w = plan._scatter_keys()
    # (L, N, 8, F) contribution of every touched entry
    up_t = upstream.reshape(plan.count, cfg.levels, cfg.features).transpose(1, 0, 2)
    vals = stacked_w[:, :, :, None] * up_t[:, :, None, :]
    flat = np.bincount(keys, weights=vals.reshape(-1),
                       minlength=cfg.levels * cfg.table_size * cfg.features)
    per_level = flat.reshape(cfg.levels, cfg.table_size, cfg.features)
    return [per_level[l] for l in range(cfg.levels)]
