"""Discrete ego-motion patterns from pose streams.

Pose differences between temporally close frames are standardised per
dimension, clustered with Lloyd's k-means, and the clusters with the largest
motions are kept as pattern IDs ``1..G``. Datasets with known discrete steps
skip clustering via :func:`declare_patterns`.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InputError


@dataclass(frozen=True)
class EgoPoseRecord:
    frame_id: int
    time_s: float
    pose: tuple


@dataclass(frozen=True)
class PoseDelta:
    i: int
    j: int
    delta: tuple
    gap_s: float


@dataclass
class MotionPatternModel:
    """Fitted (or declared) motion patterns.

    ``centroids`` live in standardised delta space; ``retained[g - 1]`` is the
    centroid index carrying pattern ID ``g``. ``radius``, when set, rejects
    deltas farther than that from their nearest centroid.
    """

    centroids: np.ndarray
    retained: list
    mean: np.ndarray
    scale: np.ndarray
    names: list = field(default_factory=list)
    radius: float | None = None
    distortion: float = 0.0

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        k = len(self.centroids)
        if not 1 <= len(self.retained) <= k or len(set(self.retained)) != len(self.retained):
            raise InputError(f"retained indices {self.retained} invalid for {k} centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise InputError("non-finite centroid")
        if not self.names:
            self.names = [f"pattern{g}" for g in range(1, len(self.retained) + 1)]

    @property
    def K(self):
        return len(self.centroids)

    @property
    def G(self):
        return len(self.retained)

    @property
    def centroids_raw(self):
        """Centroids in original pose-delta units."""
        return self.centroids * self.scale + self.mean

    def standardize(self, deltas):
        return (np.asarray(deltas, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self):
        return {
            "centroids": self.centroids.tolist(),
            "retained": [int(r) for r in self.retained],
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "names": list(self.names),
            "radius": self.radius,
            "distortion": self.distortion,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            centroids=np.array(d["centroids"], dtype=np.float64),
            retained=list(d["retained"]),
            mean=np.array(d["mean"], dtype=np.float64),
            scale=np.array(d["scale"], dtype=np.float64),
            names=list(d.get("names", [])),
            radius=d.get("radius"),
            distortion=d.get("distortion", 0.0),
        )


# --------------------------------------------------------------------------
# Pairs
# --------------------------------------------------------------------------


# timestamps like k * 0.1 carry round-off; gaps this close to the limit count as within it
TIME_TOL = 1e-9


def within_gap(gap, limit):
    return np.asarray(gap) <= limit + TIME_TOL * max(1.0, abs(limit))


def pair_indices(times, max_gap_s):
    """Index pairs ``(a, b)``, ``a < b``, with ``0 < t_b - t_a <= max_gap_s``.

    ``times`` must be strictly increasing. Gaps within a relative 1e-9 of
    the limit are accepted.
    """
    times = np.asarray(times, dtype=np.float64)
    if max_gap_s <= 0:
        raise InputError("max_gap_s must be positive")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        bad = int(np.argmin(np.diff(times) > 0))
        raise InputError(f"pose stream not strictly increasing in time at row {bad + 1}")
    ends = np.searchsorted(times, times + max_gap_s + TIME_TOL * max(1.0, max_gap_s), side="right")
    counts = ends - np.arange(times.size) - 1
    a = np.repeat(np.arange(times.size), counts)
    starts = np.repeat(np.arange(times.size) + 1, counts)
    offsets = np.arange(a.size) - np.repeat(np.cumsum(counts) - counts, counts)
    return a, starts + offsets


def build_pairs(stream, max_gap_s):
    """All ordered pairs of records at most ``max_gap_s`` seconds apart."""
    stream = list(stream)
    times = [r.time_s for r in stream]
    a, b = pair_indices(times, max_gap_s)
    poses = np.array([r.pose for r in stream], dtype=np.float64).reshape(len(stream), -1)
    out = []
    for i, j in zip(a.tolist(), b.tolist()):
        ri, rj = stream[i], stream[j]
        out.append(PoseDelta(ri.frame_id, rj.frame_id, tuple((poses[j] - poses[i]).tolist()), rj.time_s - ri.time_s))
    return out


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _plusplus(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = centers.copy()
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # empty cluster: move it to the point worst served by its centroid
                far = int(np.argmax(d2[np.arange(len(x)), labels]))
                centers[c] = x[far]
                labels[far] = c
                d2 = _sq_dists(x, centers)
    d2 = _sq_dists(x, centers)
    labels = np.argmin(d2, axis=1)
    return centers, labels, float(d2[np.arange(len(x)), labels].sum())


EXHAUSTIVE_SEEDINGS = 256


def kmeans_points(x, k, seed, n_init=10, max_iter=500):
    """Best of ``n_init`` k-means++-seeded Lloyd runs on the rows of ``x``.

    When the distinct points admit at most 256 ``k``-subsets, Lloyd is also
    started from every subset, which reaches the global optimum on small
    problems where random restarts occasionally stall in a local one.

    Returns ``(centroids, labels, distortion)`` where distortion is the sum
    of squared distances to assigned centroids.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("k-means needs a non-empty 2-D point array")
    distinct = len(np.unique(x, axis=0))
    if not 1 <= k <= distinct:
        raise InputError(f"K={k} but only {distinct} distinct points")
    rng = np.random.default_rng(seed)
    starts = [_plusplus(x, k, rng) for _ in range(n_init)]
    if math.comb(distinct, k) <= EXHAUSTIVE_SEEDINGS:
        points = np.unique(x, axis=0)
        starts += [points[list(c)] for c in itertools.combinations(range(distinct), k)]
    best = None
    for centers in starts:
        run = _lloyd(x, centers, max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best


def _delta_matrix(deltas):
    if len(deltas) == 0:
        raise InputError("no pose deltas")
    rows = [d.delta if isinstance(d, PoseDelta) else d for d in deltas]
    arr = np.array(rows, dtype=np.float64)
    return arr.reshape(len(rows), -1)


def kmeans(deltas, K, seed, n_init=10, max_iter=500) -> MotionPatternModel:
    """Standardise deltas per dimension and cluster them into ``K`` centroids.

    All centroids are retained until :func:`retain_largest` is applied.
    """
    x = _delta_matrix(deltas)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    centers, _, distortion = kmeans_points((x - mean) / scale, K, seed, n_init, max_iter)
    return MotionPatternModel(centers, list(range(K)), mean, scale, distortion=distortion)


def retain_largest(model: MotionPatternModel, G: int) -> MotionPatternModel:
    """Keep the ``G`` centroids with largest standardised norm as patterns 1..G."""
    if not 1 <= G <= model.K:
        raise InputError(f"G={G} must lie in [1, K={model.K}]")
    norms = np.linalg.norm(model.centroids, axis=1)
    order = sorted(range(model.K), key=lambda c: (-norms[c], c))[:G]
    return MotionPatternModel(
        model.centroids.copy(), order, model.mean.copy(), model.scale.copy(),
        radius=model.radius, distortion=model.distortion,
    )


def declare_patterns(steps: dict, tolerance=1e-6) -> MotionPatternModel:
    """Patterns from known discrete pose steps, e.g. ``{"up": (5, 0)}``.

    A delta maps to a step only when within ``tolerance`` of it.
    """
    if not steps:
        raise InputError("no patterns declared")
    names = list(steps)
    centers = np.array([steps[n] for n in names], dtype=np.float64).reshape(len(names), -1)
    d = centers.shape[1]
    return MotionPatternModel(centers, list(range(len(names))), np.zeros(d), np.ones(d), names=names, radius=tolerance)


def assign_patterns(model: MotionPatternModel, deltas) -> np.ndarray:
    """Vectorised :func:`assign_pattern`; 0 marks "no retained pattern"."""
    x = np.asarray(deltas, dtype=np.float64)
    x = x.reshape(len(x), -1) if x.ndim != 1 else x.reshape(1, -1)
    if x.shape[1] != model.centroids.shape[1]:
        raise DimensionError(f"delta dimension {x.shape[1]} != model dimension {model.centroids.shape[1]}")
    d2 = _sq_dists(model.standardize(x), model.centroids)
    # ties prefer retained centroids by pattern ID, then centroid index
    rank = np.full(model.K, model.G, dtype=np.int64)
    rank[model.retained] = np.arange(model.G)
    nearest_d = d2.min(axis=1, keepdims=True)
    tie_key = np.where(d2 == nearest_d, rank[None, :] * model.K + np.arange(model.K)[None, :], np.iinfo(np.int64).max)
    nearest = np.argmin(tie_key, axis=1)
    ids = np.zeros(len(x), dtype=np.int64)
    retained = rank[nearest] < model.G
    ids[retained] = rank[nearest[retained]] + 1
    if model.radius is not None:
        ids[np.sqrt(nearest_d[:, 0]) > model.radius] = 0
    return ids


def assign_pattern(model: MotionPatternModel, delta):
    """Pattern ID (1..G) of the nearest centroid, or ``None`` if not retained."""
    vec = delta.delta if isinstance(delta, PoseDelta) else delta
    g = int(assign_patterns(model, np.asarray(vec, dtype=np.float64).reshape(1, -1))[0])
    return g or None


# --------------------------------------------------------------------------
# Pose CSV
# --------------------------------------------------------------------------


def write_pose_csv(path, records):
    records = list(records)
    d = len(records[0].pose) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "time_s"] + [f"y{k}" for k in range(1, d + 1)])
    for r in records:
        w.writerow([r.frame_id, repr(float(r.time_s))] + [repr(float(v)) for v in r.pose])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_pose_csv(path):
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty pose file")
    header = rows[0]
    d = len(header) - 2
    expected = ["frame_id", "time_s"] + [f"y{k}" for k in range(1, d + 1)]
    if d < 1 or header != expected:
        raise InputError(f"{path}:1: header must be {','.join(expected) if d >= 1 else 'frame_id,time_s,y1,...'}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            records.append(EgoPoseRecord(int(row[0]), float(row[1]), tuple(float(v) for v in row[2:])))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    return records
