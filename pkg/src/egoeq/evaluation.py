"""Evaluation: equivariance error with recovered maps, recognition accuracy,
slowness ROC and feature-difference analogy retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError

RIDGE = 1e-8


@dataclass
class AffineMap:
    """``z -> matrix @ z + bias``; ``ridge`` is set when the fit needed regularising."""

    matrix: np.ndarray
    bias: np.ndarray
    ridge: bool = False

    def __call__(self, z):
        return np.asarray(z) @ self.matrix.T + self.bias

    @property
    def dim(self):
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, D):
        return cls(np.eye(D), np.zeros(D))


def fit_equiv_map(features_i, features_j) -> AffineMap:
    """Least-squares affine map with ``features_i ~= M @ features_j + b``.

    Solved in closed form through the normal equations, unregularised unless
    the Gram matrix is singular, in which case a ridge of 1e-8 is added and
    the returned map is flagged.
    """
    zi = np.asarray(features_i, dtype=np.float64)
    zj = np.asarray(features_j, dtype=np.float64)
    if zi.ndim != 2 or zi.shape != zj.shape:
        raise DimensionError(f"paired feature shapes differ: {zi.shape} vs {zj.shape}")
    n, D = zi.shape
    if n < D + 1:
        raise InputError(f"need at least {D + 1} pairs to fit a {D}-dim affine map, got {n}")
    X = np.hstack([zj, np.ones((n, 1))])
    gram = X.T @ X
    rhs = X.T @ zi
    ridge = np.linalg.matrix_rank(gram) < D + 1
    if ridge:
        gram = gram + RIDGE * np.eye(D + 1)
    W = np.linalg.solve(gram, rhs)
    return AffineMap(W[:D].T.copy(), W[D].copy(), bool(ridge))


def compose_maps(maps) -> AffineMap:
    """Affine composition with the rightmost map applied first."""
    maps = list(maps)
    if not maps:
        raise InputError("nothing to compose")
    out = maps[-1]
    for m in reversed(maps[:-1]):
        if m.matrix.shape[1] != out.matrix.shape[0]:
            raise DimensionError(f"cannot compose {m.matrix.shape} after {out.matrix.shape}")
        out = AffineMap(m.matrix @ out.matrix, m.matrix @ out.bias + m.bias, m.ridge or out.ridge)
    return out


@dataclass
class RhoResult:
    rho: float | None
    n_used: int
    n_skipped: int

    @property
    def defined(self):
        return self.rho is not None


def rho(features_i, features_j, m: AffineMap, eps=1e-12) -> RhoResult:
    """Mean of ``||z_i - M z_j|| / ||z_i - z_j||`` over pairs with a non-degenerate denominator."""
    zi = np.asarray(features_i, dtype=np.float64)
    zj = np.asarray(features_j, dtype=np.float64)
    if zi.shape != zj.shape:
        raise DimensionError(f"paired feature shapes differ: {zi.shape} vs {zj.shape}")
    den = np.linalg.norm(zi - zj, axis=1)
    num = np.linalg.norm(zi - m(zj), axis=1)
    ok = den >= eps
    n_skip = int((~ok).sum())
    if not ok.any():
        return RhoResult(None, 0, n_skip)
    return RhoResult(float(np.mean(num[ok] / den[ok])), int(ok.sum()), n_skip)


# --------------------------------------------------------------------------
# Equivariance report
# --------------------------------------------------------------------------


@dataclass
class MotionRho:
    name: str
    kind: str
    rho: float | None
    n_fit: int
    n_measure: int
    n_skipped: int
    ridge: bool = False
    rho_direct: float | None = None
    rho_learned: float | None = None
    note: str = ""

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EquivReport:
    motions: list = field(default_factory=list)

    def _mean(self, kind):
        vals = [m.rho for m in self.motions if m.kind == kind and m.rho is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def rho_atomic(self):
        return self._mean("atomic")

    @property
    def rho_composite(self):
        return self._mean("composite")

    def to_dict(self):
        return {
            "rho_atomic": self.rho_atomic,
            "rho_composite": self.rho_composite,
            "motions": [m.to_dict() for m in self.motions],
        }


def split_disjoint(n, seed, fit_fraction=0.5):
    """Random disjoint (fit, measure) index sets covering ``range(n)``."""
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * fit_fraction))
    return np.sort(order[:cut]), np.sort(order[cut:])


def _chain(left1, right1, left2, right2):
    by_start = {}
    for j, k in zip(left2.tolist(), right2.tolist()):
        by_start.setdefault(j, []).append(k)
    a, b = [], []
    for i, j in zip(left1.tolist(), right1.tolist()):
        for k in by_start.get(j, ()):
            if k == i:
                continue
            a.append(i)
            b.append(k)
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


def equiv_report(z, pairs, names=None, composites=(), seed=0, learned=None, fit_fraction=0.5):
    """Per-motion equivariance error on features ``z`` (rows indexed by ``pairs``).

    ``pairs`` carries ``left``/``right``/``pattern`` arrays for atomic motions
    (pattern IDs 1-based). For each pattern the pairs are split at random into
    disjoint fit and measure halves; ``M'_g`` mapping ``z(x)`` to ``z(gx)`` is
    fit on one half and ``rho`` measured on the other.

    ``composites`` lists ``(first, second)`` pattern-ID pairs. Their
    evaluation pairs chain a measure-half pair of ``first`` into one of
    ``second``, and ``rho`` uses the composed recovered maps
    ``M'_second M'_first``. A directly fit composite map (itself on disjoint
    halves) is reported alongside as ``rho_direct``, and ``rho_learned``
    uses the trained maps in ``learned`` when given.
    """
    z = np.asarray(z, dtype=np.float64)
    ids = sorted(np.unique(pairs.pattern).tolist())
    names = names or {g: f"pattern{g}" for g in ids}
    report = EquivReport()
    fitted, measure = {}, {}
    for g in ids:
        sel = np.flatnonzero(pairs.pattern == g)
        fit_idx, meas_idx = split_disjoint(len(sel), [seed, g], fit_fraction)
        fit_idx, meas_idx = sel[fit_idx], sel[meas_idx]
        measure[g] = (pairs.left[meas_idx], pairs.right[meas_idx])
        if len(fit_idx) <= z.shape[1]:
            report.motions.append(MotionRho(names[g], "atomic", None, len(fit_idx), len(meas_idx), 0,
                                            note="too few pairs to fit a map"))
            continue
        m = fit_equiv_map(z[pairs.right[fit_idx]], z[pairs.left[fit_idx]])
        fitted[g] = m
        r = rho(z[pairs.right[meas_idx]], z[pairs.left[meas_idx]], m)
        entry = MotionRho(names[g], "atomic", r.rho, len(fit_idx), len(meas_idx), r.n_skipped, m.ridge)
        if learned is not None:
            entry.rho_learned = rho(z[pairs.right[meas_idx]], z[pairs.left[meas_idx]], learned(g)).rho
        report.motions.append(entry)
    for first, second in composites:
        name = f"{names[first]}+{names[second]}"
        if first not in fitted or second not in fitted:
            report.motions.append(MotionRho(name, "composite", None, 0, 0, 0, note="atomic map missing"))
            continue
        a, b = _chain(*measure[first], *measure[second])
        if not len(a):
            report.motions.append(MotionRho(name, "composite", None, 0, 0, 0, note="no chained pairs"))
            continue
        composed = compose_maps([fitted[second], fitted[first]])
        r = rho(z[b], z[a], composed)
        entry = MotionRho(name, "composite", r.rho, 0, len(a),
                          r.n_skipped, composed.ridge)
        fit_idx, meas_idx = split_disjoint(len(a), [seed, first, second], fit_fraction)
        if len(fit_idx) > z.shape[1] and len(meas_idx):
            direct = fit_equiv_map(z[b[fit_idx]], z[a[fit_idx]])
            entry.rho_direct = rho(z[b[meas_idx]], z[a[meas_idx]], direct).rho
        if learned is not None:
            lm = compose_maps([learned(second), learned(first)])
            entry.rho_learned = rho(z[b], z[a], lm).rho
        report.motions.append(entry)
    return report


def view_set_report(z0, zv, views, seed=0, learned=None, fit_fraction=0.5):
    """Equivariance error from rendered view sets.

    ``z0`` holds start features ``(n, D)`` and ``zv`` the features of each
    view ``(n, V, D)`` named by ``views``. Views without ``+`` are atomic:
    their map is fit on a random half of the starts and ``rho`` measured on
    the other half. A view ``a+b`` (``a`` first) is a composite scored on the
    same measure half with ``M'_b M'_a``, alongside a directly fit map
    (``rho_direct``). ``learned`` maps an atomic name to a trained map, or
    to None when the model has none for it.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    zv = np.asarray(zv, dtype=np.float64)
    if zv.shape[:2] != (len(z0), len(views)) or zv.shape[2:] != z0.shape[1:]:
        raise DimensionError(f"view features {zv.shape} do not match starts {z0.shape} and {len(views)} views")
    fit_idx, meas_idx = split_disjoint(len(z0), [seed, 11], fit_fraction)
    if len(fit_idx) <= z0.shape[1] or not len(meas_idx):
        raise InputError(f"{len(z0)} view sets are too few to fit {z0.shape[1]}-dim maps")
    col = {name: v for v, name in enumerate(views)}
    learned = learned or {}
    report = EquivReport()
    fitted = {}
    for name in views:
        if "+" in name:
            continue
        v = col[name]
        m = fit_equiv_map(zv[fit_idx, v], z0[fit_idx])
        fitted[name] = m
        r = rho(zv[meas_idx, v], z0[meas_idx], m)
        entry = MotionRho(name, "atomic", r.rho, len(fit_idx), len(meas_idx), r.n_skipped, m.ridge)
        if learned.get(name) is not None:
            entry.rho_learned = rho(zv[meas_idx, v], z0[meas_idx], learned[name]).rho
        report.motions.append(entry)
    for name in views:
        if "+" not in name:
            continue
        parts = name.split("+")
        v = col[name]
        if any(p not in fitted for p in parts):
            report.motions.append(MotionRho(name, "composite", None, 0, len(meas_idx), 0,
                                            note="atomic view missing"))
            continue
        composed = compose_maps([fitted[p] for p in reversed(parts)])
        r = rho(zv[meas_idx, v], z0[meas_idx], composed)
        entry = MotionRho(name, "composite", r.rho, len(fit_idx), len(meas_idx), r.n_skipped, composed.ridge)
        direct = fit_equiv_map(zv[fit_idx, v], z0[fit_idx])
        entry.rho_direct = rho(zv[meas_idx, v], z0[meas_idx], direct).rho
        if all(learned.get(p) is not None for p in parts):
            lm = compose_maps([learned[p] for p in reversed(parts)])
            entry.rho_learned = rho(zv[meas_idx, v], z0[meas_idx], lm).rho
        report.motions.append(entry)
    return report


# --------------------------------------------------------------------------
# Recognition
# --------------------------------------------------------------------------


def topk_correct(logits, labels, top_k=1):
    """Per-row hit flags: true class within the ``top_k`` highest logits, ties to lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        raise InputError("empty test set")
    if top_k < 1:
        raise InputError("top_k must be at least 1")
    rows = np.arange(len(labels))
    true = logits[rows, labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (cls < labels[:, None]))
    return ahead.sum(axis=1) < top_k


def recognition_accuracy(logits, labels, top_k=1):
    """Percentage of rows whose label is among the ``top_k`` logits."""
    return 100.0 * float(np.mean(topk_correct(logits, labels, top_k)))


def mean_stderr(values):
    """Mean and standard error (sample std / sqrt(R)); stderr is 0 for R = 1."""
    v = np.asarray(values, dtype=np.float64)
    if not len(v):
        raise InputError("no repetitions")
    se = float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(np.mean(v)), se


# --------------------------------------------------------------------------
# ROC
# --------------------------------------------------------------------------


@dataclass
class RocReport:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float | None
    n_pos: int
    n_neg: int

    @property
    def defined(self):
        return self.auroc is not None

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "thresholds": self.thresholds.tolist(),
            "tpr": self.tpr.tolist(),
            "fpr": self.fpr.tolist(),
        }


def roc_curve(scores, labels) -> RocReport:
    """ROC over every distinct score threshold (higher score = predicted positive).

    AUROC is the trapezoidal area; it is ``None`` when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.zeros(0, dtype=np.int64)
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    thresholds = np.r_[np.inf, s[last]]
    if n_pos == 0 or n_neg == 0:
        nan = np.full(len(thresholds), np.nan)
        return RocReport(thresholds, nan, nan, None, n_pos, n_neg)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocReport(thresholds, tpr, fpr, auroc, n_pos, n_neg)


def pair_distances(zi, zj, distance="l2"):
    diff = np.asarray(zi, dtype=np.float64) - np.asarray(zj, dtype=np.float64)
    if distance == "l2":
        return np.sqrt((diff * diff).sum(axis=1))
    if distance == "l1":
        return np.abs(diff).sum(axis=1)
    raise InputError(f"unknown distance {distance!r}")


def slowness_auroc(zi, zj, neighbor, distance="l2") -> RocReport:
    """How well ``-||z_i - z_j||`` predicts the temporal-neighbour flag."""
    return roc_curve(-pair_distances(zi, zj, distance), neighbor)


# --------------------------------------------------------------------------
# Analogies
# --------------------------------------------------------------------------


@dataclass
class AnalogyResult:
    query: tuple
    feature_neighbors: list
    feature_distances: list
    pixel_neighbors: list
    pixel_distances: list
    truncated: bool


def _nearest(diffs, q, K):
    d = np.sqrt(((diffs - q) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")[:K]
    return order, d[order]


def analogy_nn(z, pixels, candidates, query, K) -> AnalogyResult:
    """Candidate pairs whose difference vector is closest to the query's.

    Neighbours are ranked in feature-difference space ``z_k - z_l`` and,
    for comparison, in pixel-difference space. Candidates equal to the query
    pair are excluded; asking for more than remain returns them all with
    ``truncated`` set.
    """
    if K < 1:
        raise InputError("K must be at least 1")
    left, right = (np.asarray(c, dtype=np.int64) for c in candidates)
    i, j = query
    keep = ~((left == i) & (right == j))
    left, right = left[keep], right[keep]
    if not len(left):
        raise InputError("no candidate pairs besides the query")
    truncated = K > len(left)
    z = np.asarray(z, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    f_order, f_dist = _nearest(z[left] - z[right], z[i] - z[j], K)
    p_order, p_dist = _nearest(px[left] - px[right], px[i] - px[j], K)
    pairs = list(zip(left.tolist(), right.tolist()))
    return AnalogyResult(
        (int(i), int(j)),
        [pairs[k] for k in f_order],
        f_dist.tolist(),
        [pairs[k] for k in p_order],
        p_dist.tolist(),
        truncated,
    )
