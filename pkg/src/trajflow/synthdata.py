"""Synthetic "talking-shape" clips with exactly known motion.

Renders an anti-aliased composite shape (disk body, two eye dots, a mouth
bar) moving along an analytic center path, together with foreground
masks, seven landmark points and closed-form displacement oracles. These
clips stand in for real footage everywhere the pipeline needs ground
truth: flow accuracy, trajectory supervision, landmark losses.

Translating clips render on a torus (content wraps around the frame
edges) so constant-velocity motion can run for many frames inside a small
canvas; orbit and oscillate paths must stay inside the frame and are
rejected otherwise. Per-frame displacements above 4 px are rejected
because the flow estimator's linearization breaks down beyond that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

MAX_STEP_PX = 4.0

BODY_INTENSITY = 0.45
EYE_INTENSITY = 1.0
MOUTH_INTENSITY = 0.85
HAT_INTENSITY = 0.95

# landmark offsets in units of the body radius: both eyes, three mouth
# points, body center, an inner crown point
_LANDMARK_OFFSETS = np.array([
    (-0.36, -0.33),
    (+0.36, -0.33),
    (-0.42, +0.42),
    (0.00, +0.42),
    (+0.42, +0.42),
    (0.00, 0.00),
    (0.00, -0.75),
])

LANDMARK_COUNT = len(_LANDMARK_OFFSETS)


@dataclass(frozen=True)
class MotionSpec:
    kind: str                       # translate | orbit | oscillate
    params: tuple[float, ...]
    seed: int = 0
    jitter: float = 0.0             # per-frame uniform center jitter, px

    def __post_init__(self):
        kinds = {"translate": 2, "orbit": 2, "oscillate": 3}
        if self.kind not in kinds:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if len(self.params) != kinds[self.kind]:
            raise ValueError(f"{self.kind} takes {kinds[self.kind]} params, "
                             f"got {len(self.params)}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params),
                "seed": self.seed, "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls(kind=d["kind"], params=tuple(float(p) for p in d["params"]),
                   seed=int(d.get("seed", 0)), jitter=float(d.get("jitter", 0.0)))


@dataclass
class VideoBundle:
    frames: np.ndarray              # (K, H, W) float64 in [0, 1]
    masks: np.ndarray               # (K, H, W) bool
    landmarks: np.ndarray           # (K, P, 2) float64 (x, y) pixel coords
    motion: MotionSpec | None
    role: str                       # rendered | edited

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ValueError("bundle needs at least 2 frames of shape (K, H, W)")
        if self.masks.shape != self.frames.shape:
            raise ValueError(f"masks {self.masks.shape} do not match frames "
                             f"{self.frames.shape}")
        if self.landmarks.ndim != 3 or self.landmarks.shape[0] != self.frames.shape[0] \
                or self.landmarks.shape[2] != 2:
            raise ValueError(f"landmarks {self.landmarks.shape} do not match "
                             f"{self.frames.shape[0]} frames")
        if self.role not in ("rendered", "edited"):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def _jitter_offsets(spec: MotionSpec, count: int) -> np.ndarray:
    if spec.jitter == 0.0:
        return np.zeros((count, 2))
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(-spec.jitter, spec.jitter, size=(count, 2))


def center_path(spec: MotionSpec, frames: int, height: int, width: int) -> np.ndarray:
    """Analytic (x, y) body-center positions for frames 1..K."""
    c0 = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    i = np.arange(frames, dtype=np.float64)
    if spec.kind == "translate":
        vx, vy = spec.params
        path = c0 + np.stack([vx * i, vy * i], axis=1)
    elif spec.kind == "orbit":
        radius, omega = spec.params
        ang = omega * i
        path = c0 + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:  # oscillate
        ax, ay, period = spec.params
        phase = np.sin(2.0 * math.pi * i / period)
        path = c0 + np.stack([ax * phase, ay * phase], axis=1)
    return path + _jitter_offsets(spec, frames)


def oracle_displacement(spec: MotionSpec, i: int, j: int) -> tuple[float, float]:
    """Closed-form displacement of the shape center from frame i to frame j."""
    if i < 1 or j < 1:
        raise ValueError("frames are numbered from 1")
    n = max(i, j)
    path = center_path(spec, n, 64, 64)  # c0 cancels in the difference
    d = path[j - 1] - path[i - 1]
    return float(d[0]), float(d[1])


def body_radius(height: int, width: int) -> float:
    return 0.22 * min(height, width)


def _offset_grids(height, width, cx, cy, wrap):
    xg, yg = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    dx = xg - cx
    dy = yg - cy
    if wrap:
        dx = np.mod(dx + width / 2.0, width) - width / 2.0
        dy = np.mod(dy + height / 2.0, height) - height / 2.0
    return dx, dy


def _disk_cov(dx, dy, radius):
    sd = np.hypot(dx, dy) - radius
    return np.clip(0.5 - sd, 0.0, 1.0)


def _box_cov(dx, dy, half_w, half_h):
    sd = np.maximum(np.abs(dx) - half_w, np.abs(dy) - half_h)
    return np.clip(0.5 - sd, 0.0, 1.0)


def _render_frame(height, width, cx, cy, wrap, with_hat=False):
    r = body_radius(height, width)
    dx, dy = _offset_grids(height, width, cx, cy, wrap)
    body = _disk_cov(dx, dy, r)
    img = body * BODY_INTENSITY
    for sx in (-1.0, 1.0):
        eye = _disk_cov(dx - sx * 0.36 * r, dy + 0.33 * r, 0.18 * r)
        img = img * (1.0 - eye) + EYE_INTENSITY * eye
    mouth = _box_cov(dx, dy - 0.42 * r, 0.42 * r, 0.10 * r)
    img = img * (1.0 - mouth) + MOUTH_INTENSITY * mouth
    mask = body >= 0.5
    if with_hat:
        hat = _box_cov(dx, dy + 1.25 * r, 0.5 * r, 0.12 * r)
        img = img * (1.0 - hat) + HAT_INTENSITY * hat
        mask = mask | (hat >= 0.5)
    return np.clip(img, 0.0, 1.0), mask


def _check_path(spec: MotionSpec, path: np.ndarray, height, width, margin: float):
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    if steps.size and steps.max() > MAX_STEP_PX:
        raise ValueError(f"per-frame displacement {steps.max():.2f} px exceeds "
                         f"{MAX_STEP_PX} px")
    if spec.kind != "translate":
        lo = path.min(axis=0)
        hi = path.max(axis=0)
        if lo[0] < margin or lo[1] < margin or hi[0] > width - 1 - margin \
                or hi[1] > height - 1 - margin:
            raise ValueError(f"{spec.kind} path leaves the {width}x{height} frame")


def generate(spec: MotionSpec, frames: int, height: int, width: int) -> VideoBundle:
    """Render a rendered-role bundle: frames, masks, landmarks."""
    if height < 32 or width < 32:
        raise ValueError("frame size must be at least 32x32")
    if frames < 2:
        raise ValueError("need at least 2 frames")
    r = body_radius(height, width)
    path = center_path(spec, frames, height, width)
    _check_path(spec, path, height, width, margin=r + 1.0)

    imgs = np.empty((frames, height, width))
    masks = np.empty((frames, height, width), dtype=bool)
    lms = np.empty((frames, LANDMARK_COUNT, 2))
    wrap = spec.kind == "translate"
    for k in range(frames):
        cx, cy = path[k]
        imgs[k], masks[k] = _render_frame(height, width, cx, cy, wrap)
        pts = np.array([cx, cy]) + _LANDMARK_OFFSETS * r
        if wrap:
            pts[:, 0] = np.mod(pts[:, 0], width)
            pts[:, 1] = np.mod(pts[:, 1], height)
        lms[k] = pts
    return VideoBundle(frames=imgs, masks=masks, landmarks=lms,
                       motion=spec, role="rendered")


def apply_edit(bundle: VideoBundle, kind: str, gamma: float = 2.0) -> VideoBundle:
    """Appearance-only edit of a rendered bundle; motion and landmarks stay.

    `recolor` remaps intensities by an exponent; `accessory` re-renders
    with a hat bar rigidly attached above the body.
    """
    if bundle.role != "rendered":
        raise ValueError("edits apply to rendered bundles")
    if kind == "recolor":
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return VideoBundle(frames=np.power(bundle.frames, gamma),
                           masks=bundle.masks.copy(),
                           landmarks=bundle.landmarks.copy(),
                           motion=bundle.motion, role="edited")
    if kind == "accessory":
        spec = bundle.motion
        if spec is None:
            raise ValueError("accessory edit needs the generating motion spec")
        h, w = bundle.height, bundle.width
        path = center_path(spec, bundle.frame_count, h, w)
        wrap = spec.kind == "translate"
        if not wrap:
            r = body_radius(h, w)
            if (path[:, 1] - 1.37 * r - 1.0).min() < 0:
                raise ValueError("accessory leaves the frame")
        imgs = np.empty_like(bundle.frames)
        masks = np.empty_like(bundle.masks)
        for k in range(bundle.frame_count):
            imgs[k], masks[k] = _render_frame(h, w, path[k, 0], path[k, 1],
                                              wrap, with_hat=True)
        return VideoBundle(frames=imgs, masks=masks,
                           landmarks=bundle.landmarks.copy(),
                           motion=spec, role="edited")
    raise ValueError(f"unknown edit kind {kind!r}")


def perturb_motion(spec: MotionSpec, jitter: float, seed: int) -> MotionSpec:
    """Same nominal path with seeded per-frame jitter; used to fabricate
    motion-inconsistent 'edited' clips."""
    return replace(spec, jitter=jitter, seed=seed)


# -- landmark extraction from pixels ----------------------------------------

def shape_centroid(frame: np.ndarray, threshold: float = 0.2,
                   wrap: bool = False) -> tuple[float, float]:
    """Soft-thresholded intensity centroid of the foreground shape.

    With `wrap`, positions are averaged circularly per axis so a shape
    straddling the frame edge still yields its torus center.
    """
    f = np.asarray(frame, dtype=np.float64)
    w = np.clip(f - threshold, 0.0, None)
    total = w.sum()
    if total <= 0:
        raise ValueError("no foreground mass above threshold")
    h, wd = f.shape
    ys, xs = np.mgrid[0:h, 0:wd]
    if not wrap:
        return float((w * xs).sum() / total), float((w * ys).sum() / total)
    ax = 2.0 * math.pi * xs / wd
    ay = 2.0 * math.pi * ys / h
    mx = math.atan2((w * np.sin(ax)).sum(), (w * np.cos(ax)).sum())
    my = math.atan2((w * np.sin(ay)).sum(), (w * np.cos(ay)).sum())
    return (mx * wd / (2.0 * math.pi)) % wd, (my * h / (2.0 * math.pi)) % h


def predicted_landmarks(frame: np.ndarray, template_frame: np.ndarray,
                        template_landmarks: np.ndarray,
                        wrap: bool = False) -> np.ndarray:
    """Landmarks of a (possibly generated) frame via rigid centroid shift
    against a template frame with known landmarks."""
    cx, cy = shape_centroid(frame, wrap=wrap)
    tx, ty = shape_centroid(template_frame, wrap=wrap)
    out = np.asarray(template_landmarks, dtype=np.float64) + [cx - tx, cy - ty]
    if wrap:
        h, w = frame.shape
        out = out.copy()
        out[:, 0] = np.mod(out[:, 0], w)
        out[:, 1] = np.mod(out[:, 1], h)
    return out


def texture_clip(frames: int, height: int, width: int,
                 velocity: tuple[float, float], seed: int = 0,
                 smoothness: float = 3.0) -> np.ndarray:
    """Full-frame smooth random texture translating at a constant velocity.

    Periodic Gaussian-filtered noise, shifted per frame by Fourier phase
    so the translation is exact (also for fractional velocities) and
    wraps seamlessly. Every pixel moves, making full-frame flow
    statistics an exact oracle.
    """
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.standard_normal((height, width)),
                                   smoothness, mode="wrap")
    lo, hi = base.min(), base.max()
    base = 0.1 + 0.8 * (base - lo) / (hi - lo)
    spectrum = np.fft.fft2(base)
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    vx, vy = velocity
    out = np.empty((frames, height, width))
    for k in range(frames):
        shift = np.exp(-2j * math.pi * (fx * vx * k + fy * vy * k))
        out[k] = np.clip(np.fft.ifft2(spectrum * shift).real, 0.0, 1.0)
    return out
