"""In-memory datasets, their on-disk form, and generators for the synthetic worlds.

On disk a dataset is a directory::

    manifest.json        frame count, pose dim, class count, world config, seed, episodes
    poses.csv            frame_id,time_s,y1,...,yd
    labels.csv           frame_id,class   (0-based class index)
    frames/NNNNNN.pgm    8-bit P5 frames

Pixel values are quantised on write as ``value = offset + pixel * scale``
(``offset``/``scale`` stored in the manifest), so a dataset read back from
disk holds exactly the quantised values.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .motion import EgoPoseRecord, read_pose_csv, write_pose_csv
from .pgm import read_pgm, write_pgm
from .worlds import (
    LatentLinearWorld,
    TextureWorld,
    gen_latent_episode,
    drive_script,
    gen_texture_episode,
    plane_rotation,
    raster_script,
)

DATASET_FORMAT = "egoeq-dataset"


@dataclass
class Dataset:
    frames: np.ndarray
    frame_ids: np.ndarray
    times: np.ndarray
    poses: np.ndarray
    labels: np.ndarray
    episodes: np.ndarray
    splits: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def frame_shape(self):
        return tuple(self.frames.shape[1:])

    @property
    def num_classes(self):
        return int(self.meta.get("class_count", self.labels.max() + 1 if len(self.labels) else 0))

    def records(self, rows=None):
        rows = range(len(self)) if rows is None else rows
        return [EgoPoseRecord(int(self.frame_ids[r]), float(self.times[r]), tuple(self.poses[r].tolist())) for r in rows]

    def rows(self, split):
        keep = [e for e, s in self.splits.items() if s == split]
        return np.flatnonzero(np.isin(self.episodes, keep))

    def row_of(self, frame_ids):
        lookup = {int(f): r for r, f in enumerate(self.frame_ids)}
        return np.array([lookup[int(f)] for f in frame_ids], dtype=np.int64)


def from_episodes(episodes, splits, meta):
    frames = np.concatenate([e.frames for e in episodes])
    records = [r for e in episodes for r in e.records]
    return Dataset(
        frames=frames,
        frame_ids=np.array([r.frame_id for r in records], dtype=np.int64),
        times=np.array([r.time_s for r in records]),
        poses=np.array([r.pose for r in records], dtype=np.float64).reshape(len(records), -1),
        labels=np.concatenate([np.full(len(e.records), e.label, dtype=np.int64) for e in episodes]),
        episodes=np.concatenate([np.full(len(e.records), k, dtype=np.int64) for k, e in enumerate(episodes)]),
        splits={k: s for k, s in enumerate(splits)},
        meta=meta,
    )


# --------------------------------------------------------------------------
# Quantisation and disk format
# --------------------------------------------------------------------------


def pixel_scaling(frames):
    lo, hi = float(frames.min()), float(frames.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, (hi - lo) / 255.0


def quantize_frames(frames, offset, scale):
    """Round ``frames`` to the 8-bit grid ``offset + scale * {0..255}``."""
    return offset + np.clip(np.rint((np.asarray(frames) - offset) / scale), 0, 255) * scale


def quantize(ds: Dataset) -> Dataset:
    """Round frames to the 8-bit grid they would be stored on."""
    offset, scale = ds.meta.get("pixel_offset"), ds.meta.get("pixel_scale")
    if offset is None:
        offset, scale = pixel_scaling(ds.frames)
    meta = dict(ds.meta, pixel_offset=offset, pixel_scale=scale)
    return Dataset(quantize_frames(ds.frames, offset, scale), ds.frame_ids.copy(), ds.times.copy(),
                   ds.poses.copy(), ds.labels.copy(), ds.episodes.copy(), dict(ds.splits), meta)


def _image_shape(frame_shape):
    if len(frame_shape) == 3 and frame_shape[0] == 1:
        return frame_shape[1:]
    if len(frame_shape) == 1:
        n = frame_shape[0]
        side = math.isqrt(n)
        if side * side == n:
            return (side, side)
        return (1, n)
    raise InputError(f"cannot store frames of shape {frame_shape} as grayscale images")


def write_dataset(path, ds: Dataset):
    path = Path(path)
    ds = quantize(ds)
    offset, scale = ds.meta["pixel_offset"], ds.meta["pixel_scale"]
    (path / "frames").mkdir(parents=True, exist_ok=True)
    image_shape = _image_shape(ds.frame_shape)
    for fid, frame in zip(ds.frame_ids, ds.frames):
        pixels = np.rint((frame - offset) / scale).astype(np.uint8).reshape(image_shape)
        write_pgm(path / "frames" / f"{int(fid):06d}.pgm", pixels)
    write_pose_csv(path / "poses.csv", ds.records())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "class"])
    for fid, lab in zip(ds.frame_ids, ds.labels):
        if lab >= 0:
            w.writerow([int(fid), int(lab)])
    (path / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    episodes = []
    for e in sorted(ds.splits):
        rows = np.flatnonzero(ds.episodes == e)
        episodes.append({
            "id": int(e), "split": ds.splits[e], "first_frame": int(ds.frame_ids[rows[0]]),
            "count": int(len(rows)), "class": int(ds.labels[rows[0]]),
        })
    manifest = {k: v for k, v in ds.meta.items() if k not in ("pixel_offset", "pixel_scale")}
    manifest.update({
        "format": DATASET_FORMAT,
        "frame_count": len(ds),
        "frame_shape": list(ds.frame_shape),
        "pose_dim": int(ds.poses.shape[1]),
        "class_count": ds.num_classes,
        "pixel_offset": offset,
        "pixel_scale": scale,
        "episodes": episodes,
    })
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_labels(path):
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["frame_id", "class"]:
        raise InputError(f"{path}:1: header must be frame_id,class")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise InputError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            out[int(row[0])] = int(row[1])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"no dataset manifest in {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path / 'manifest.json'}: invalid JSON ({exc})") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise InputError(f"{path}: not an egoeq dataset")
    records = read_pose_csv(path / "poses.csv")
    if len(records) != manifest["frame_count"]:
        raise InputError(f"{path / 'poses.csv'}: {len(records)} rows, manifest says {manifest['frame_count']}")
    labels = _read_labels(path / "labels.csv")
    frame_shape = tuple(manifest["frame_shape"])
    offset, scale = manifest["pixel_offset"], manifest["pixel_scale"]
    frames = np.empty((len(records),) + frame_shape)
    for k, r in enumerate(records):
        pixels = read_pgm(path / "frames" / f"{r.frame_id:06d}.pgm")
        if pixels.size != math.prod(frame_shape):
            raise InputError(f"frame {r.frame_id}: {pixels.shape} does not hold frame shape {frame_shape}")
        frames[k] = offset + pixels.reshape(frame_shape).astype(np.float64) * scale
    frame_ids = np.array([r.frame_id for r in records], dtype=np.int64)
    episodes = np.empty(len(records), dtype=np.int64)
    splits = {}
    row = {int(f): k for k, f in enumerate(frame_ids)}
    for e in manifest["episodes"]:
        start = row[e["first_frame"]]
        episodes[start:start + e["count"]] = e["id"]
        splits[e["id"]] = e["split"]
    meta = {k: v for k, v in manifest.items() if k not in ("format", "episodes", "frame_shape")}
    return Dataset(
        frames=frames,
        frame_ids=frame_ids,
        times=np.array([r.time_s for r in records]),
        poses=np.array([r.pose for r in records]),
        labels=np.array([labels.get(int(f), -1) for f in frame_ids], dtype=np.int64),
        episodes=episodes,
        splits=splits,
        meta=meta,
    )


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------

LINEAR_DEFAULTS = {
    "kind": "linear",
    "latent_dim": 4,
    "obs_dim": 64,
    "num_classes": 5,
    "noise_sigma": 0.01,
    "up_deg": 10.0,
    "right_deg": 15.0,
    "prototype_scale": 1.0,
    "nuisance_dim": 0,
    "nuisance_gain": 0.0,
    "nuisance_step": 0.0,
    "nuisance_init": 0.0,
    "nuisance_walk": True,
    "start_jitter_deg": 0.0,
    "grid_rows": 4,
    "grid_cols": 6,
    "train_episodes_per_class": 2,
    "test_episodes_per_class": 1,
    "dt": 0.1,
}

TEXTURE_DEFAULTS = {
    "kind": "texture",
    "num_classes": 4,
    "texture_size": 64,
    "window": [24, 24],
    "octaves": 4,
    "turn_deg": 10.0,
    "forward_step": 1.0,
    "zoom_rate": 0.08,
    "pose_noise": 0.3,
    "episode_length": 16,
    "motion_probs": {"left": 0.25, "right": 0.25, "zoom": 0.5},
    "train_episodes_per_class": 4,
    "test_episodes_per_class": 2,
    "dt": 0.25,
}

_WORLD_KEYS = {
    "linear": ("latent_dim", "obs_dim", "num_classes", "noise_sigma", "up_deg", "right_deg",
               "prototype_scale", "nuisance_dim", "nuisance_gain", "nuisance_step", "nuisance_init",
               "nuisance_walk"),
    "texture": ("num_classes", "texture_size", "window", "octaves", "turn_deg", "forward_step",
                "zoom_rate", "pose_noise"),
}


def world_config(cfg):
    kind = cfg.get("kind", "linear")
    defaults = {"linear": LINEAR_DEFAULTS, "texture": TEXTURE_DEFAULTS}.get(kind)
    if defaults is None:
        raise InputError(f"unknown world kind {kind!r}")
    out = dict(defaults)
    out.update(cfg)
    return out


def make_world(cfg, seed):
    cfg = world_config(cfg)
    kwargs = {k: cfg[k] for k in _WORLD_KEYS[cfg["kind"]]}
    if cfg["kind"] == "linear":
        return LatentLinearWorld.create(seed, **kwargs)
    kwargs["window"] = tuple(kwargs["window"])
    return TextureWorld.create(seed, **kwargs)


def generate_dataset(cfg, seed):
    """Build the dataset described by a world config section.

    Linear worlds scan a ``grid_rows x grid_cols`` elevation/azimuth grid
    per episode (NORB-style); texture worlds follow random turn/zoom
    scripts. Episodes are separated in time by more than any pairing gap.
    """
    cfg = world_config(cfg)
    world = make_world(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    n_train, n_test = cfg["train_episodes_per_class"], cfg["test_episodes_per_class"]
    episodes, splits = [], []
    t0, fid = 0.0, 0
    for c in range(cfg["num_classes"]):
        for e in range(n_train + n_test):
            ep_seed = int(rng.integers(2**31 - 1))
            if cfg["kind"] == "linear":
                length = cfg["grid_rows"] * cfg["grid_cols"]
                script = raster_script(cfg["grid_rows"], cfg["grid_cols"])
                a, b = np.radians(rng.uniform(-1.0, 1.0, size=2) * cfg["start_jitter_deg"])
                k = world.latent_dim
                start = plane_rotation(k, 0, 1, a) @ plane_rotation(k, 2, 3, b) @ world.prototypes[c]
                ep = gen_latent_episode(world, length, script, ep_seed, start_state=start, label=c,
                                        start_time=t0, dt=cfg["dt"], first_frame_id=fid)
            else:
                length = cfg["episode_length"]
                script = drive_script(length - 1, ep_seed, cfg["motion_probs"])
                ep = gen_texture_episode(world, length, script, ep_seed, label=c, start_time=t0,
                                         dt=cfg["dt"], first_frame_id=fid)
            episodes.append(ep)
            splits.append("train" if e < n_train else "test")
            fid += length
            t0 += length * cfg["dt"] + 100.0
    meta = {"world": cfg, "seed": seed, "class_count": cfg["num_classes"]}
    if cfg["kind"] == "linear":
        meta["atomic_steps"] = {name: world.pose_step(name).tolist() for name in world.atomic_motions}
    return from_episodes(episodes, splits, meta), world
