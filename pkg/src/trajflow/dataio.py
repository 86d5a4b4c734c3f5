"""On-disk formats: bundles, landmark files, checkpoints, CSV reports.

Frames travel as 16-bit binary PGM (the Netpbm format stores two-byte
samples most-significant first), masks as 8-bit PGM with values {0, 255},
landmarks as plain text with one line per frame, and a JSON manifest ties
a bundle directory together. Checkpoints are a single binary file:
magic, version, a JSON config header, all parameter arrays as
little-endian float64 and a SHA-256 integrity checksum. Every failure
mode is an explicit exception naming the offending path; nothing is
silently truncated.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import flowmatch as fm
from . import hashgrid as hg
from . import synthdata as sd

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"FYM1"
CHECKPOINT_VERSION = 1


class BundleFormatError(ValueError):
    """A bundle directory or one of its files is malformed or missing."""


class CheckpointError(ValueError):
    """A checkpoint file failed validation (magic, version or checksum)."""


# -- portable graymaps -------------------------------------------------------

def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("write_pgm expects a 2-D image with values in [0, 1]")
    q = np.rint(img * maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        fields: list[bytes] = []
        pos = 0
        while len(fields) < 4:
            while raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end:end + 1].isspace():
                end += 1
            fields.append(raw[pos:end])
            pos = end
        pos += 1  # single whitespace after maxval
        if fields[0] != b"P5":
            raise BundleFormatError(f"{path}: not a binary PGM")
        width, height, maxval = (int(f) for f in fields[1:])
    except (IndexError, ValueError) as exc:
        raise BundleFormatError(f"{path}: corrupt PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    expected = width * height * (2 if maxval > 255 else 1)
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise BundleFormatError(f"{path}: truncated PGM payload")
    data = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return data.astype(np.float64) / maxval


# -- landmark files ----------------------------------------------------------

def write_landmarks(path, landmarks: np.ndarray) -> None:
    """One line per frame: frame index then x y pairs, 6 decimals."""
    lms = np.asarray(landmarks, dtype=np.float64)
    lines = []
    for k in range(lms.shape[0]):
        vals = " ".join(f"{v:.6f}" for v in lms[k].reshape(-1))
        lines.append(f"{k + 1} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise BundleFormatError(f"{path}: empty landmark file")
    frames = []
    points = None
    for i, ln in enumerate(lines):
        parts = ln.split()
        if int(parts[0]) != i + 1:
            raise BundleFormatError(f"{path}: expected frame {i + 1}, "
                                    f"found {parts[0]}")
        coords = np.array([float(v) for v in parts[1:]])
        if coords.size % 2:
            raise BundleFormatError(f"{path}: odd coordinate count on line {i + 1}")
        if points is None:
            points = coords.size // 2
        elif coords.size // 2 != points:
            raise BundleFormatError(f"{path}: inconsistent landmark count "
                                    f"on line {i + 1}")
        frames.append(coords.reshape(-1, 2))
    return np.stack(frames)


# -- bundle directories ------------------------------------------------------

def write_bundle(directory, bundle: sd.VideoBundle) -> Path:
    """Write frames, masks, landmarks and the manifest; returns manifest path."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    frame_paths, mask_paths = [], []
    for k in range(bundle.frame_count):
        fp = f"frames/frame_{k + 1:04d}.pgm"
        mp = f"masks/mask_{k + 1:04d}.pgm"
        write_pgm(root / fp, bundle.frames[k])
        write_pgm(root / mp, bundle.masks[k].astype(np.float64), maxval=255)
        frame_paths.append(fp)
        mask_paths.append(mp)
    write_landmarks(root / "landmarks.txt", bundle.landmarks)
    manifest = {
        "version": MANIFEST_VERSION,
        "width": bundle.width,
        "height": bundle.height,
        "frame_count": bundle.frame_count,
        "role": bundle.role,
        "frames": frame_paths,
        "masks": mask_paths,
        "landmarks": "landmarks.txt",
        "motion": bundle.motion.to_dict() if bundle.motion else None,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_bundle(directory) -> sd.VideoBundle:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise BundleFormatError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{manifest_path}: invalid JSON") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise BundleFormatError(f"{manifest_path}: unsupported manifest "
                                f"version {manifest.get('version')!r}")
    count = manifest["frame_count"]
    for key in ("frames", "masks"):
        if len(manifest[key]) != count:
            raise BundleFormatError(f"{manifest_path}: {key} list does not "
                                    f"match frame_count {count}")
    frames, masks = [], []
    for rel in manifest["frames"]:
        p = root / rel
        if not p.exists():
            raise BundleFormatError(f"{manifest_path}: missing frame {rel}")
        frames.append(read_pgm(p))
    for rel in manifest["masks"]:
        p = root / rel
        if not p.exists():
            raise BundleFormatError(f"{manifest_path}: missing mask {rel}")
        masks.append(read_pgm(p) >= 0.5)
    lms = read_landmarks(root / manifest["landmarks"])
    if lms.shape[0] != count:
        raise BundleFormatError(f"{manifest_path}: landmark file covers "
                                f"{lms.shape[0]} frames, expected {count}")
    motion = sd.MotionSpec.from_dict(manifest["motion"]) if manifest["motion"] else None
    return sd.VideoBundle(frames=np.stack(frames), masks=np.stack(masks),
                          landmarks=lms, motion=motion, role=manifest["role"])


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model: fm.VelocityModel
    table: hg.FeatureTable
    train_config: fm.TrainConfig | None
    extras: dict[str, np.ndarray]


def write_checkpoint(path, model: fm.VelocityModel, table: hg.FeatureTable,
                     train_config: fm.TrainConfig | None = None,
                     extras: dict[str, np.ndarray] | None = None) -> None:
    extras = extras or {}
    arrays: list[tuple[str, np.ndarray]] = []
    for name in fm.VelocityModel.PARAM_ORDER:
        arrays.append((f"model.{name}", model.params[name].data))
    for i, lv in enumerate(table.levels):
        arrays.append((f"table.level{i}", lv.data))
    for name in sorted(extras):
        arrays.append((f"extra.{name}", np.asarray(extras[name], dtype=np.float64)))

    header = {
        "model": model.config.to_dict(),
        "grid": table.config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(a.astype("<f8").tobytes() for _, a in arrays)
    body = (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION,
                                           len(header_bytes))
            + header_bytes + payload)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if len(raw) < 44 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    try:
        header = json.loads(body[12:12 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc

    offset = 12 + header_len
    values: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset)
        values[name] = arr.reshape(shape).astype(np.float64)
        offset += n * 8
    if offset != len(body):
        raise CheckpointError(f"{path}: payload length mismatch")

    model_cfg = fm.ModelConfig.from_dict(header["model"])
    grid_cfg = hg.HashGridConfig.from_dict(header["grid"])
    params = {name: ad.parameter(values[f"model.{name}"], name=name)
              for name in fm.VelocityModel.PARAM_ORDER}
    model = fm.VelocityModel(model_cfg, params)
    levels = [ad.parameter(values[f"table.level{i}"], name=f"hash_level{i}")
              for i in range(grid_cfg.levels)]
    table = hg.FeatureTable(grid_cfg, levels)
    extras = {name[len("extra."):]: arr for name, arr in values.items()
              if name.startswith("extra.")}
    train_cfg = fm.TrainConfig.from_dict(header["train"]) if header.get("train") else None
    return Checkpoint(model=model, table=table, train_config=train_cfg,
                      extras=extras)


# -- CSV reports -------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_consistency_report(path, reference_series, edited_series) -> float:
    """Per-pair flow magnitudes plus a trailing sum-of-|diff| total row."""
    ref = np.asarray(reference_series, dtype=np.float64)
    ed = np.asarray(edited_series, dtype=np.float64)
    if ref.shape != ed.shape:
        raise ValueError(f"series lengths differ: {ref.shape} vs {ed.shape}")
    rows = []
    total = 0.0
    for i, (r, e) in enumerate(zip(ref, ed)):
        rows.append((f"{i + 1}-{i + 2}", r, e, abs(r - e)))
        total += abs(r - e)
    rows.append(("total", "", "", total))
    write_csv(path, ["pair", "m_reference", "m_edited", "abs_diff"], rows)
    return total


def write_expression_report(path, expression_err: float, frames: int,
                            points: int) -> None:
    write_csv(path, ["frames", "points", "expression_error"],
              [(frames, points, expression_err)])


def write_loss_curve(path, losses) -> None:
    write_csv(path, ["step", "loss"],
              [(i + 1, float(v)) for i, v in enumerate(losses)])


# -- trajectory map dumps ----------------------------------------------------

def write_trajectory_map(path, grid: np.ndarray, frame: int) -> None:
    """Flat little-endian f64 dump: u32 header (H, W, channels, frame)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError("trajectory grid must be (H, W, channels)")
    header = struct.pack("<IIII", g.shape[0], g.shape[1], g.shape[2], frame)
    Path(path).write_bytes(header + g.astype("<f8").tobytes())


def read_trajectory_map(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise BundleFormatError(f"{path}: truncated trajectory map")
    h, w, c, frame = struct.unpack("<IIII", raw[:16])
    expected = 16 + h * w * c * 8
    if len(raw) != expected:
        raise BundleFormatError(f"{path}: trajectory payload length mismatch")
    grid = np.frombuffer(raw, dtype="<f8", offset=16).reshape(h, w, c)
    return grid.astype(np.float64), frame
