"""Rectified-flow conditional flow matching over trajectory tokens.

The forward map takes a clean frame to a_t*x0 + b_t*eps with the
rectified-flow schedule a_t = 1-t, b_t = t; the conditional velocity is
its time derivative eps - x0. The model predicts a velocity field per
pixel from the noisy frame, the first frame, Fourier position/time
features and one cross-attention read over trajectory tokens, and is
trained on the noise-reparameterized objective: the velocity estimate is
converted to a noise estimate and penalized by the squared error scaled
with (b_t*lambda'_t/2)^2, which for rectified flow equals 1/(1-t)^2.

Time is clamped to [t_min, 1-t_min]; the weight diverges at t=1.
Sampling integrates dz/dt = v(z, t) with explicit Euler from noise at
t = 1-t_min down to t_min.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import hashgrid as hg
from . import reweight
from . import synthdata
from . import trajectory as traj
from .autodiff import NonFiniteValue, ShapeMismatch, Tensor


# -- schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleValues:
    a: float
    b: float
    da: float
    db: float
    log_snr: float
    d_log_snr: float


def schedule_eval(t: float, t_min: float = 1e-3) -> ScheduleValues:
    """Rectified-flow schedule values at one clamped time."""
    if not 0.0 < t_min < 0.5:
        raise ValueError("t_min must lie in (0, 0.5)")
    if not t_min <= t <= 1.0 - t_min:
        raise ValueError(f"t={t} outside clamped domain [{t_min}, {1.0 - t_min}]")
    a = 1.0 - t
    b = t
    log_snr = 2.0 * (math.log(a) - math.log(b))
    d_log_snr = -2.0 / a - 2.0 / b
    return ScheduleValues(a=a, b=b, da=-1.0, db=1.0,
                          log_snr=log_snr, d_log_snr=d_log_snr)


def loss_weight(t: float, t_min: float = 1e-3) -> float:
    s = schedule_eval(t, t_min)
    return (-s.b * s.d_log_snr / 2.0) ** 2


def _pair(x0, eps, op: str):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"{op}: shapes {x0.shape} and {eps.shape} differ")
    return x0, eps


def noisy_sample(x0, eps, t: float, t_min: float = 1e-3) -> np.ndarray:
    """z = a_t*x0 + b_t*eps."""
    x0, eps = _pair(x0, eps, "noisy_sample")
    s = schedule_eval(t, t_min)
    return s.a * x0 + s.b * eps


def velocity_target(x0, eps, t: float, t_min: float = 1e-3) -> np.ndarray:
    """Conditional velocity a'_t*x0 + b'_t*eps; eps - x0 for rectified flow."""
    x0, eps = _pair(x0, eps, "velocity_target")
    s = schedule_eval(t, t_min)
    return s.da * x0 + s.db * eps


def eps_from_velocity(v, z, t: float, t_min: float = 1e-3) -> np.ndarray:
    """Noise implied by a velocity estimate: (-2/(lambda'_t b_t))(v - (a'_t/a_t) z)."""
    v, z = _pair(v, z, "eps_from_velocity")
    s = schedule_eval(t, t_min)
    c = -2.0 / (s.d_log_snr * s.b)
    return c * (v - (s.da / s.a) * z)


# -- velocity model ------------------------------------------------------------

def fourier_features(vals: np.ndarray, freqs: int) -> np.ndarray:
    """sin/cos of each column at octave frequencies; (N, cols*2*freqs)."""
    vals = np.atleast_2d(np.asarray(vals, dtype=np.float64))
    out = []
    for k in range(freqs):
        w = 2.0 * math.pi * (2 ** k)
        out.append(np.sin(w * vals))
        out.append(np.cos(w * vals))
    return np.concatenate(out, axis=1)


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int            # trajectory token feature length (levels*features)
    width: int = 128
    pos_freqs: int = 4
    time_freqs: int = 4

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "width": self.width,
                "pos_freqs": self.pos_freqs, "time_freqs": self.time_freqs}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(feature_dim=int(d["feature_dim"]), width=int(d["width"]),
                   pos_freqs=int(d["pos_freqs"]), time_freqs=int(d["time_freqs"]))


class VelocityModel:
    """Per-pixel velocity head with one cross-attention over tokens.

    Queries embed (z, first-frame value, pixel position, time) per pixel;
    keys/values embed each token's trajectory feature plus its position.
    """

    PARAM_ORDER = ("wq", "bq", "wk_t", "wk_p", "bk", "wv_t", "wv_p", "bv",
                   "w1", "b1", "w2", "b2", "w_out", "b_out")

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}
        self._tok_cache: dict[bytes, np.ndarray] = {}

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "VelocityModel":
        d = config.width
        q_in = 2 + 4 * config.pos_freqs + 2 * config.time_freqs
        tok_in = config.feature_dim
        pos_in = 4 * config.pos_freqs

        def w(name, fan_in, fan_out):
            return ad.parameter(rng.normal(scale=1.0 / math.sqrt(fan_in),
                                           size=(fan_in, fan_out)), name=name)

        def b(name, n):
            return ad.parameter(np.zeros(n), name=name)

        params = {
            "wq": w("wq", q_in, d), "bq": b("bq", d),
            "wk_t": w("wk_t", tok_in, d), "wk_p": w("wk_p", pos_in, d), "bk": b("bk", d),
            "wv_t": w("wv_t", tok_in, d), "wv_p": w("wv_p", pos_in, d), "bv": b("bv", d),
            "w1": w("w1", d, d), "b1": b("b1", d),
            "w2": w("w2", d, d), "b2": b("b2", d),
            "w_out": w("w_out", d, 1), "b_out": b("b_out", 1),
        }
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in self.PARAM_ORDER]

    def pixel_features(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._pos_cache:
            pts = traj.pixel_points(height, width, 1, 2)[:, :2]
            self._pos_cache[key] = fourier_features(pts, self.config.pos_freqs)
        return self._pos_cache[key]

    def token_features(self, positions: np.ndarray) -> np.ndarray:
        key = positions.tobytes()
        if key not in self._tok_cache:
            self._tok_cache[key] = fourier_features(positions, self.config.pos_freqs)
        return self._tok_cache[key]

    def forward(self, z_flat: np.ndarray, t: float, first_flat: np.ndarray,
                tokens: traj.TrajectoryTokens, height: int, width: int) -> Tensor:
        p = self.params
        n = height * width
        t_feat = fourier_features(np.array([[t]]), self.config.time_freqs)
        q_in = np.concatenate([
            z_flat.reshape(n, 1), first_flat.reshape(n, 1),
            self.pixel_features(height, width),
            np.repeat(t_feat, n, axis=0),
        ], axis=1)
        q = ad.affine(ad.as_tensor(q_in), p["wq"], p["bq"])

        tok_pos = ad.as_tensor(self.token_features(tokens.positions))
        k = ad.add(ad.affine(tokens.features, p["wk_t"], p["bk"]),
                   ad.matmul(tok_pos, p["wk_p"]))
        v = ad.add(ad.affine(tokens.features, p["wv_t"], p["bv"]),
                   ad.matmul(tok_pos, p["wv_p"]))
        att = ad.attention(q, k, v)
        h = ad.silu(ad.add(q, att))
        h = ad.silu(ad.affine(h, p["w1"], p["b1"]))
        h = ad.silu(ad.affine(h, p["w2"], p["b2"]))
        return ad.affine(h, p["w_out"], p["b_out"])


def cfm_loss(model: VelocityModel, x0: np.ndarray, tokens: traj.TrajectoryTokens,
             first: np.ndarray, t: float, eps: np.ndarray,
             t_min: float = 1e-3) -> Tensor:
    """Weighted noise-matching loss for one frame at one time.

    Differentiable into the model parameters and, through the tokens,
    into the hash tables. Tokens must already carry their weights.
    """
    x0, eps = _pair(x0, eps, "cfm_loss")
    s = schedule_eval(t, t_min)
    z = s.a * x0 + s.b * eps
    for stage, arr in (("x0", x0), ("eps", eps), ("z", z)):
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"cfm_loss: non-finite values at stage '{stage}'")
    height, width = x0.shape
    v = model.forward(z.reshape(-1, 1), t, np.asarray(first).reshape(-1, 1),
                      tokens, height, width)
    if not np.isfinite(v.data).all():
        raise NonFiniteValue("cfm_loss: non-finite values at stage 'velocity'")
    c = -2.0 / (s.d_log_snr * s.b)
    eps_hat = ad.add(ad.scale(v, c),
                     ad.as_tensor((-c * s.da / s.a) * z.reshape(-1, 1)))
    err = ad.squared_error(eps_hat, ad.as_tensor(eps.reshape(-1, 1)))
    return ad.scale(err, (-s.b * s.d_log_snr / 2.0) ** 2)


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 4
    learning_rate: float = 1e-4
    token_grid: int = 8
    t_min: float = 1e-3
    seed: int = 0
    phase: str = "train"            # train | finetune
    dram: bool = False
    dram_interval: int = 100
    dram_sample_steps: int = 20

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.t_min < 0.5:
            raise ValueError("t_min must lie in (0, 0.5)")
        if self.phase not in ("train", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.dram_interval < 1:
            raise ValueError("dram_interval must be >= 1")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "token_grid": self.token_grid,
                "t_min": self.t_min, "seed": self.seed, "phase": self.phase,
                "dram": self.dram, "dram_interval": self.dram_interval,
                "dram_sample_steps": self.dram_sample_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(steps=int(d["steps"]), batch_size=int(d["batch_size"]),
                   learning_rate=float(d["learning_rate"]),
                   token_grid=int(d["token_grid"]), t_min=float(d["t_min"]),
                   seed=int(d["seed"]), phase=str(d["phase"]),
                   dram=bool(d["dram"]), dram_interval=int(d["dram_interval"]),
                   dram_sample_steps=int(d["dram_sample_steps"]))


@dataclass
class TrainResult:
    losses: np.ndarray
    weight_matrix: np.ndarray      # final HxW re-weighting state
    token_weights: np.ndarray      # final pooled per-token weights


def frame_tokens(table: hg.FeatureTable, bundle: synthdata.VideoBundle,
                 frame: int, grid: int,
                 plans: list[hg.EncodePlan] | None = None,
                 token_weights: np.ndarray | None = None,
                 first_encoding: ad.Tensor | None = None) -> traj.TrajectoryTokens:
    """Weighted conditioning tokens of one bundle frame (1-based)."""
    plan = plans[frame - 1] if plans else None
    first = plans[0] if plans else None
    tmap = traj.trajectory_map(table, frame, bundle.masks[frame - 1],
                               bundle.frame_count, plan=plan, first_plan=first,
                               first_encoding=first_encoding)
    tokens = traj.downsample_to_tokens(tmap, grid)
    if token_weights is None:
        token_weights = np.ones(tokens.count)
    return traj.apply_token_weights(tokens, token_weights)


def sample_frame(model: VelocityModel, tokens: traj.TrajectoryTokens,
                 first: np.ndarray, steps: int, seed: int,
                 t_min: float = 1e-3) -> np.ndarray:
    """Euler-integrate the learned velocity field from noise down to t_min."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    first = np.asarray(first, dtype=np.float64)
    height, width = first.shape
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((height * width, 1))
    ts = np.linspace(1.0 - t_min, t_min, steps + 1)
    first_flat = first.reshape(-1, 1)
    for k in range(steps):
        v = model.forward(z, float(ts[k]), first_flat, tokens, height, width).data
        z = z + (ts[k + 1] - ts[k]) * v
        if not np.isfinite(z).all():
            raise NonFiniteValue(f"sample_frame: non-finite state at step {k}")
    return z.reshape(height, width)


def sample_bundle_frame(model: VelocityModel, table: hg.FeatureTable,
                        bundle: synthdata.VideoBundle, frame: int, steps: int,
                        seed: int, grid: int,
                        plans: list[hg.EncodePlan] | None = None,
                        token_weights: np.ndarray | None = None,
                        t_min: float = 1e-3) -> np.ndarray:
    tokens = frame_tokens(table, bundle, frame, grid, plans, token_weights)
    return sample_frame(model, tokens, bundle.frames[0], steps, seed, t_min)


def train(model: VelocityModel, table: hg.FeatureTable,
          bundle: synthdata.VideoBundle, cfg: TrainConfig,
          reference_landmarks: np.ndarray | None = None,
          predicted_landmark_fn: Callable[[int], np.ndarray] | None = None) -> TrainResult:
    """Adam-train model and tables on one bundle.

    Each step draws (frame, t, noise) from the seeded stream, builds that
    frame's weighted tokens and takes one step on the CFM loss. With
    `cfg.dram`, the re-weighting state is refreshed every
    `cfg.dram_interval` steps from landmark losses between reference
    landmarks and landmarks predicted on a freshly sampled frame (a
    separate random stream keeps the training draws untouched).

    For the finetune phase the caller initializes model and table from a
    phase-1 checkpoint; the loop itself is phase-independent.
    """
    height, width = bundle.height, bundle.width
    if height % cfg.token_grid or width % cfg.token_grid:
        raise ValueError(f"token grid {cfg.token_grid} does not divide "
                         f"frames of {height}x{width}")
    if cfg.dram and reference_landmarks is None:
        reference_landmarks = bundle.landmarks
    if cfg.dram and reference_landmarks is not None \
            and len(reference_landmarks) != bundle.frame_count:
        raise ValueError("reference landmarks do not cover every frame")

    plans = traj.build_frame_plans(table.config, height, width, bundle.frame_count)
    params = model.parameters() + table.parameters()
    opt = ad.Adam(params, lr=cfg.learning_rate)
    ss = np.random.SeedSequence(cfg.seed)
    train_seed, dram_seed = ss.spawn(2)
    rng = np.random.default_rng(train_seed)
    dram_rng = np.random.default_rng(dram_seed)

    weight_matrix = reweight.init_weights(height, width)
    token_weights = traj.pool_weight_matrix(weight_matrix, cfg.token_grid)
    wrap = bundle.motion is not None and bundle.motion.kind == "translate"

    def default_predicted(frame: int) -> np.ndarray:
        img = sample_bundle_frame(model, table, bundle, frame,
                                  cfg.dram_sample_steps,
                                  int(dram_rng.integers(2 ** 31)),
                                  cfg.token_grid, plans, token_weights,
                                  cfg.t_min)
        return synthdata.predicted_landmarks(np.clip(img, 0.0, 1.0),
                                             bundle.frames[0],
                                             bundle.landmarks[0], wrap=wrap)

    predict = predicted_landmark_fn or default_predicted
    losses = np.empty(cfg.steps)
    dram_frame_cycle = 0

    for step in range(cfg.steps):
        if cfg.dram and step % cfg.dram_interval == 0:
            frame = 2 + dram_frame_cycle % (bundle.frame_count - 1)
            dram_frame_cycle += 1
            ref = reference_landmarks[frame - 1]
            if not np.isfinite(ref).all():
                warnings.warn(f"no reference landmarks for frame {frame}; "
                              "keeping previous weights")
            else:
                try:
                    pred = predict(frame)
                except ValueError as exc:
                    warnings.warn(f"landmark prediction failed for frame "
                                  f"{frame} ({exc}); keeping previous weights")
                else:
                    weight_matrix, token_weights = reweight.dram_step(
                        (height, width), cfg.token_grid, ref, pred)

        frames = rng.integers(0, bundle.frame_count, size=cfg.batch_size)
        ts = rng.uniform(cfg.t_min, 1.0 - cfg.t_min, size=cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, height, width))

        tape = ad.Tape()
        with ad.recording(tape):
            first_enc = hg.encode_with_plan(table, plans[0])
            total = None
            for bi in range(cfg.batch_size):
                frame = int(frames[bi]) + 1
                tokens = frame_tokens(table, bundle, frame, cfg.token_grid,
                                      plans, token_weights,
                                      first_encoding=first_enc)
                part = cfm_loss(model, bundle.frames[frame - 1], tokens,
                                bundle.frames[0], float(ts[bi]), noise[bi],
                                cfg.t_min)
                total = part if total is None else ad.add(total, part)
            loss = ad.scale(total, 1.0 / cfg.batch_size)
        grads = ad.backward(tape, loss, params)
        opt.step(grads)
        losses[step] = float(loss.data)

    return TrainResult(losses=losses, weight_matrix=weight_matrix,
                       token_weights=token_weights)


def smoothed(losses: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average used for the loss-decrease checks."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return losses
    w = min(window, losses.size)
    c = np.concatenate([[0.0], np.cumsum(losses)])
    out = np.empty_like(losses)
    for i in range(losses.size):
        lo = max(0, i - w + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
