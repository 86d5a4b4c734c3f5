"""Evaluation metrics: dense optical flow, temporal consistency, landmark
expression error and PSNR.

The temporal-consistency statistic of a clip is the series of mean flow
magnitudes over consecutive frame pairs; two clips are compared by the
sum of absolute per-pair differences of their series (a pseudometric on
series). All functions here are pure and bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

FLOW_LEVELS = 3
FLOW_WINDOW = 5
FLOW_ITERATIONS = 3
_MIN_SIDE = 16
_RIDGE = 1e-4          # Tikhonov floor keeping the 2x2 solves well-posed
_MEDFILT = 3           # per-iteration flow median filter, kills outliers


def _validate_frame_pair(a, b, op):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"{op}: frames must share a 2-D shape, got "
                         f"{a.shape} and {b.shape}")
    for name, f in (("first", a), ("second", b)):
        if not np.isfinite(f).all() or f.min() < -1e-9 or f.max() > 1.0 + 1e-9:
            raise ValueError(f"{op}: {name} frame must be grayscale in [0, 1]")
    return a, b


def _resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[:2]
    ys = np.linspace(0, h - 1, shape[0])
    xs = np.linspace(0, w - 1, shape[1])
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((shape[0], shape[1], arr.shape[2]))
    for c in range(arr.shape[2]):
        out[..., c] = ndimage.map_coordinates(arr[..., c], [yg, xg],
                                              order=1, mode="nearest")
    return out


def _warp(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    yg, xg = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(frame, [yg + flow[..., 1], xg + flow[..., 0]],
                                   order=1, mode="grid-wrap")


def _central_diff(arr: np.ndarray, axis: int) -> np.ndarray:
    return (np.roll(arr, -1, axis) - np.roll(arr, 1, axis)) / 2.0


def optical_flow(frame_a, frame_b, levels: int = FLOW_LEVELS,
                 window: int = FLOW_WINDOW,
                 iterations: int = FLOW_ITERATIONS) -> np.ndarray:
    """Dense pyramidal Lucas-Kanade displacement from frame_a to frame_b.

    Returns (H, W, 2) per-pixel (dx, dy) in pixels. Three half-resolution
    pyramid levels, 5x5 windows and three warp iterations per level by
    default. Filtering, warping and gradients treat the frame as periodic
    (translating clips render toroidally and static borders are
    unaffected); border pixels whose window overhangs the frame then take
    the nearest interior estimate.
    """
    a, b = _validate_frame_pair(frame_a, frame_b, "optical_flow")
    if min(a.shape) < _MIN_SIDE:
        raise ValueError(f"optical_flow: frames must be at least "
                         f"{_MIN_SIDE}x{_MIN_SIDE}, got {a.shape}")

    pyr_a = [ndimage.gaussian_filter(a, 1.0, mode="wrap")]
    pyr_b = [ndimage.gaussian_filter(b, 1.0, mode="wrap")]
    for _ in range(levels - 1):
        pyr_a.append(ndimage.gaussian_filter(pyr_a[-1], 1.0, mode="wrap")[::2, ::2])
        pyr_b.append(ndimage.gaussian_filter(pyr_b[-1], 1.0, mode="wrap")[::2, ::2])

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for level in range(levels - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape:
            flow = _resize_bilinear(flow, la.shape) * 2.0
        for _ in range(iterations):
            warped = _warp(lb, flow)
            avg = (la + warped) / 2.0
            gx = _central_diff(avg, 1)
            gy = _central_diff(avg, 0)
            gt = warped - la
            sxx = ndimage.uniform_filter(gx * gx, window, mode="wrap") + _RIDGE
            syy = ndimage.uniform_filter(gy * gy, window, mode="wrap") + _RIDGE
            sxy = ndimage.uniform_filter(gx * gy, window, mode="wrap")
            sxt = ndimage.uniform_filter(gx * gt, window, mode="wrap")
            syt = ndimage.uniform_filter(gy * gt, window, mode="wrap")
            det = sxx * syy - sxy * sxy
            du = (sxy * syt - syy * sxt) / det
            dv = (sxy * sxt - sxx * syt) / det
            np.clip(du, -window, window, out=du)
            np.clip(dv, -window, window, out=dv)
            flow = flow + np.stack([du, dv], axis=-1)
            for c in range(2):
                flow[..., c] = ndimage.median_filter(flow[..., c], _MEDFILT,
                                                     mode="wrap")

    margin = window // 2
    interior = flow[margin:-margin or None, margin:-margin or None]
    return np.pad(interior, ((margin, margin), (margin, margin), (0, 0)),
                  mode="edge")


def flow_series(frames: np.ndarray) -> np.ndarray:
    """Mean flow magnitude of every consecutive frame pair (full frame)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("flow_series needs at least 2 frames of shape (K, H, W)")
    out = np.empty(frames.shape[0] - 1)
    for i in range(out.size):
        f = optical_flow(frames[i], frames[i + 1])
        out[i] = np.hypot(f[..., 0], f[..., 1]).mean()
    return out


def consistency_total_error(edited: np.ndarray, reference: np.ndarray) -> float:
    """Sum of absolute per-pair differences between two consistency series."""
    e = np.asarray(edited, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if e.shape != r.shape or e.ndim != 1:
        raise ValueError(f"series lengths differ: {e.shape} vs {r.shape}")
    return float(np.abs(e - r).sum())


def expression_error(reference_seq: np.ndarray, predicted_seq: np.ndarray) -> float:
    """Mean Euclidean landmark distance over all frames and points."""
    ref = np.asarray(reference_seq, dtype=np.float64)
    pred = np.asarray(predicted_seq, dtype=np.float64)
    if ref.shape != pred.shape or ref.ndim != 3 or ref.shape[2] != 2:
        raise ValueError(f"landmark sequences must both be (K, P, 2); got "
                         f"{ref.shape} and {pred.shape}")
    d = ref - pred
    return float(np.hypot(d[..., 0], d[..., 1]).mean())


PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB for [0,1] frames, capped at 99 (identical)."""
    a, b = _validate_frame_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def flow_error_vs_constant(flow: np.ndarray, displacement: tuple[float, float],
                           mask: np.ndarray | None = None) -> float:
    """Mean absolute endpoint error of a flow field against a rigid
    displacement, optionally restricted to a validity mask."""
    target = np.asarray(displacement, dtype=np.float64)
    err = np.linalg.norm(flow - target, axis=-1)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.mean())
