"""Mini-batch Nesterov SGD for the feature network, equivariance maps and classifier.

Methods:

``clsnet``       softmax loss only
``temporal``     softmax + slowness loss with l1 distance
``drlim``        softmax + slowness loss with l2 distance
``equiv``        softmax + equivariance loss
``equiv_drlim``  softmax + equivariance + l2 slowness

With ``supervised=False`` the softmax term is dropped. Every Siamese stack
is the one ``Network`` instance, so the stacks cannot drift apart.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine
from .engine import Network, OptimizerState, nesterov_step
from .errors import DivergenceError, InputError
from .losses import (
    ClassifierHead,
    EquivMapSet,
    equiv_loss_features,
    neighbor_flags,
    slowness_loss_features,
    softmax_loss_features,
)
from .motion import MotionPatternModel, assign_patterns, pair_indices

log = logging.getLogger(__name__)

METHODS = ("clsnet", "temporal", "drlim", "equiv", "equiv_drlim")


@dataclass
class TrainConfig:
    method: str = "equiv"
    lambda_equiv: float = 1.0
    lambda_slow: float = 1.0
    margin_equiv: float | None = None
    margin_slow: float = 1.0
    temporal_window_s: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size_cls: int = 16
    batch_size_pairs: int = 16
    iterations: int = 5000
    neg_ratio: int = 3
    seed: int = 0
    map_init_noise: float = 0.1
    negatives: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.margin_equiv is None:
            # the combined objective uses a tighter equivariance margin than the slowness one
            self.margin_equiv = 0.1 if self.method == "equiv_drlim" else 1.0
        for name in ("margin_equiv", "margin_slow", "temporal_window_s", "learning_rate",
                     "batch_size_cls", "batch_size_pairs"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        for name in ("lambda_equiv", "lambda_slow", "iterations", "neg_ratio"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")

    @property
    def uses_equiv(self):
        return self.method in ("equiv", "equiv_drlim")

    @property
    def slowness_variant(self):
        return {"temporal": "l1_temporal", "drlim": "l2_drlim", "equiv_drlim": "l2_drlim"}.get(self.method)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown train config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Training data
# --------------------------------------------------------------------------


@dataclass
class PairSet:
    """Equivariance pairs: ``frames[left] -> frames[right]`` under pattern ``pattern`` (1-based)."""

    left: np.ndarray
    right: np.ndarray
    pattern: np.ndarray

    def __len__(self):
        return len(self.left)

    def subset(self, mask):
        return PairSet(self.left[mask], self.right[mask], self.pattern[mask])


@dataclass
class SlowPairSet:
    left: np.ndarray
    right: np.ndarray
    neighbor: np.ndarray

    def __len__(self):
        return len(self.left)


@dataclass
class TrainData:
    frames: np.ndarray
    labeled_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pairs: PairSet | None = None
    slow_pairs: SlowPairSet | None = None


def mine_pairs(ds, model: MotionPatternModel, max_gap_s, rows=None, both_directions=False) -> PairSet:
    """Frame pairs within ``max_gap_s`` labelled with their retained pattern ID.

    ``both_directions`` also considers each pair backwards in time, which
    suits pose-grid scans where time order carries no meaning.
    """
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    a, b = pair_indices(ds.times[rows], max_gap_s)
    a, b = rows[a], rows[b]
    same = ds.episodes[a] == ds.episodes[b]
    a, b = a[same], b[same]
    if both_directions:
        a, b = np.concatenate([a, b]), np.concatenate([b, a])
    ids = assign_patterns(model, ds.poses[b] - ds.poses[a]) if len(a) else np.zeros(0, dtype=np.int64)
    keep = ids > 0
    return PairSet(a[keep], b[keep], ids[keep])


def slowness_pairs(ds, T, horizon_s, rows=None) -> SlowPairSet:
    """Within-episode pairs up to ``horizon_s`` apart, flagged ``|t_i - t_j| <= T``."""
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    a, b = pair_indices(ds.times[rows], horizon_s)
    a, b = rows[a], rows[b]
    same = ds.episodes[a] == ds.episodes[b]
    a, b = a[same], b[same]
    return SlowPairSet(a, b, neighbor_flags(ds.times[a], ds.times[b], T))


def sample_labeled(ds, per_class, seed, rows=None):
    """``per_class`` random labelled rows of every class (sorted)."""
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(ds.num_classes):
        pool = rows[ds.labels[rows] == c]
        if len(pool) < per_class:
            raise InputError(f"class {c} has {len(pool)} labelled frames, need {per_class}")
        picked.append(rng.choice(pool, size=per_class, replace=False))
    out = np.sort(np.concatenate(picked))
    return out, ds.labels[out]


# --------------------------------------------------------------------------
# Samplers (each owns an independent RNG stream)
# --------------------------------------------------------------------------


class LabeledSampler:
    def __init__(self, rows, labels, batch_size, rng):
        self.rows, self.labels = np.asarray(rows), np.asarray(labels)
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)

    def next(self):
        out = []
        need = self.batch_size
        while need:
            if not len(self._order):
                self._order = self.rng.permutation(len(self.rows))
            take, self._order = self._order[:need], self._order[need:]
            out.append(take)
            need -= len(take)
        idx = np.concatenate(out)
        return self.rows[idx], self.labels[idx]


class EquivSampler:
    """Epochs over positive pairs; each positive of pattern g gets ``neg_ratio``
    fresh negatives (pairs of other patterns) per epoch, all scored against map g."""

    def __init__(self, pairs: PairSet, batch_size, neg_ratio, rng, negatives=True):
        if len(pairs) == 0:
            raise InputError("no equivariance pairs to train on")
        self.pairs = pairs
        self.batch_size = batch_size
        self.neg_ratio = neg_ratio if negatives else 0
        self.rng = rng
        self.by_other = {
            g: np.flatnonzero(pairs.pattern != g) for g in np.unique(pairs.pattern).tolist()
        }
        self._queue = []

    def _new_epoch(self):
        order = self.rng.permutation(len(self.pairs))
        negs = np.full((len(order), self.neg_ratio), -1, dtype=np.int64)
        if self.neg_ratio:
            for n, p in enumerate(order):
                pool = self.by_other[int(self.pairs.pattern[p])]
                if len(pool):
                    negs[n] = pool[self.rng.integers(len(pool), size=self.neg_ratio)]
        self._queue = list(zip(order.tolist(), negs))

    def next(self):
        """Rows ``(left, right, map_idx, positive)`` for one batch."""
        chunk = []
        while len(chunk) < self.batch_size:
            if not self._queue:
                self._new_epoch()
            take = self.batch_size - len(chunk)
            chunk += self._queue[:take]
            self._queue = self._queue[take:]
        pos = np.array([p for p, _ in chunk], dtype=np.int64)
        maps = self.pairs.pattern[pos] - 1
        neg = np.stack([n for _, n in chunk]) if self.neg_ratio else np.zeros((len(chunk), 0), dtype=np.int64)
        neg_maps = np.repeat(maps, neg.shape[1])
        neg = neg.reshape(-1)
        valid = neg >= 0
        idx = np.concatenate([pos, neg[valid]])
        map_idx = np.concatenate([maps, neg_maps[valid]])
        positive = np.concatenate([np.ones(len(pos), bool), np.zeros(int(valid.sum()), bool)])
        return self.pairs.left[idx], self.pairs.right[idx], map_idx, positive


class SlowSampler:
    """Batches of ``batch_size`` neighbour pairs plus ``neg_ratio`` times as many non-neighbours."""

    def __init__(self, pairs: SlowPairSet, batch_size, neg_ratio, rng):
        self.pos = np.flatnonzero(pairs.neighbor)
        self.neg = np.flatnonzero(~pairs.neighbor)
        if not len(self.pos):
            raise InputError("no temporal-neighbour pairs; increase temporal_window_s")
        self.pairs = pairs
        self.batch_size = batch_size
        self.neg_ratio = neg_ratio if len(self.neg) else 0
        self.rng = rng

    def next(self):
        p = self.pos[self.rng.integers(len(self.pos), size=self.batch_size)]
        n = self.neg[self.rng.integers(len(self.neg), size=self.batch_size * self.neg_ratio)] if self.neg_ratio else p[:0]
        idx = np.concatenate([p, n])
        return self.pairs.left[idx], self.pairs.right[idx], self.pairs.neighbor[idx]


# --------------------------------------------------------------------------
# Model bundle
# --------------------------------------------------------------------------


@dataclass
class Model:
    net: Network
    maps: EquivMapSet
    head: ClassifierHead | None = None
    patterns: MotionPatternModel | None = None
    seed: int = 0
    iteration: int = 0

    def modules(self):
        return [m for m in (self.net, self.maps, self.head) if m is not None]

    def features(self, x, batch_size=512):
        """Feature rows for ``x`` (evaluated in fixed-size chunks)."""
        out = [engine.forward(self.net, x[k:k + batch_size])[0] for k in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.net.feature_dim))


def build_model(net: Network, num_patterns, num_classes, seed, map_init_noise=0.1, patterns=None):
    """Xavier-initialised network, identity-plus-noise maps, Xavier classifier head."""
    s_net, s_maps, s_head = np.random.SeedSequence(seed).generate_state(3)
    engine.init_xavier(net, int(s_net))
    maps = EquivMapSet(max(num_patterns, 1), net.feature_dim).init_identity_noise(int(s_maps), map_init_noise)
    head = ClassifierHead(net.feature_dim, num_classes).init_xavier(int(s_head)) if num_classes >= 2 else None
    return Model(net, maps, head, patterns, seed)


def save_model(path, model: Model, extra=None):
    blobs = engine.network_blobs(model.net)
    blobs["maps.matrices"] = model.maps.matrices
    blobs["maps.biases"] = model.maps.biases
    if model.head is not None:
        blobs["head.W"] = model.head.W
        blobs["head.bias"] = model.head.bias
    manifest = {
        "network": model.net.to_dict(),
        "seed": model.seed,
        "iteration": model.iteration,
        "patterns": model.patterns.to_dict() if model.patterns is not None else None,
        "num_classes": model.head.C if model.head is not None else 0,
    }
    if extra:
        manifest["extra"] = extra
    return engine.save_checkpoint(path, blobs, manifest)


def load_model(path):
    doc, blobs = engine.load_checkpoint(path)
    net = engine.load_network(doc["network"], blobs)
    maps = EquivMapSet(*blobs["maps.matrices"].shape[:2])
    maps.matrices[...] = blobs["maps.matrices"]
    maps.biases[...] = blobs["maps.biases"]
    head = None
    if "head.W" in blobs:
        head = ClassifierHead(*blobs["head.W"].shape)
        head.W[...] = blobs["head.W"]
        head.bias[...] = blobs["head.bias"]
    patterns = MotionPatternModel.from_dict(doc["patterns"]) if doc.get("patterns") else None
    return Model(net, maps, head, patterns, doc.get("seed", 0), doc.get("iteration", 0)), doc


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "loss_total", "loss_cls", "loss_equiv", "loss_slow")


@dataclass
class TrainResult:
    model: Model
    trace: list
    state: OptimizerState

    def trace_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _stack_forward(net, frames, rows):
    # one forward over the concatenated rows of every stack sharing ``net``
    return engine.forward(net, frames[rows])


def train(model: Model, data: TrainData, config: TrainConfig, supervised=True, callback=None) -> TrainResult:
    """Optimise the configured objective for ``config.iterations`` steps.

    ``callback(iteration, model, parts)`` runs after every update, with
    ``parts`` the unweighted per-term losses.
    """
    ss_cls, ss_eq, ss_slow = np.random.SeedSequence(config.seed).spawn(3)
    if config.method == "clsnet" and not supervised:
        raise InputError("clsnet has no unsupervised objective")
    if supervised and (model.head is None or not len(data.labeled_rows)):
        raise InputError("supervised training needs a classifier head and labelled rows")
    samplers = (
        LabeledSampler(data.labeled_rows, data.labels, config.batch_size_cls,
                       np.random.default_rng(ss_cls)) if supervised else None,
        EquivSampler(data.pairs, config.batch_size_pairs, config.neg_ratio,
                     np.random.default_rng(ss_eq), config.negatives) if config.uses_equiv else None,
        SlowSampler(data.slow_pairs, config.batch_size_pairs, config.neg_ratio,
                    np.random.default_rng(ss_slow)) if config.slowness_variant else None,
    )
    modules = model.modules()
    state = OptimizerState(config.learning_rate, config.momentum)
    trace = []
    # overflow surfaces as DivergenceError through the finiteness checks, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.iterations):
            parts = _step(model, data, config, samplers, modules)
            total = parts["cls"] + config.lambda_equiv * parts["equiv"] + config.lambda_slow * parts["slow"]
            trace.append((it, total, parts["cls"], parts["equiv"], parts["slow"]))
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at iteration {it}", trace)
            try:
                nesterov_step(modules, parts["grads"], state)
            except DivergenceError as exc:
                exc.trace = trace
                raise
            model.iteration += 1
            if callback is not None:
                callback(it, model, {k: parts[k] for k in ("cls", "equiv", "slow")})
    return TrainResult(model, trace, state)


def _step(model: Model, data: TrainData, config: TrainConfig, samplers, modules):
    """Losses and lambda-weighted gradients for one minibatch of every active term."""
    net, maps, head = model.net, model.maps, model.head
    cls_sampler, eq_sampler, slow_sampler = samplers
    grads = [np.zeros_like(p) for m in modules for p in m.parameters()]
    n_net = len(net.parameters())
    net_grads = grads[:n_net]
    map_grads = grads[n_net:n_net + 2]
    parts = {"cls": 0.0, "equiv": 0.0, "slow": 0.0, "grads": grads}
    if cls_sampler is not None:
        rows, labels = cls_sampler.next()
        z, tape = _stack_forward(net, data.frames, rows)
        parts["cls"], g_z, g_head = softmax_loss_features(head, z, labels)
        g, _ = engine.backward(net, tape, g_z)
        for a, b in zip(net_grads, g):
            a += b
        for a, b in zip(grads[n_net + 2:], g_head):
            a += b
    if eq_sampler is not None:
        left, right, map_idx, positive = eq_sampler.next()
        z, tape = _stack_forward(net, data.frames, np.concatenate([left, right]))
        n = len(left)
        parts["equiv"], g_zi, g_zj, g_maps = equiv_loss_features(
            z[:n], z[n:], maps, map_idx, positive, config.margin_equiv, reduction="mean"
        )
        g, _ = engine.backward(net, tape, np.concatenate([g_zi, g_zj]))
        lam = config.lambda_equiv
        for a, b in zip(net_grads, g):
            a += lam * b
        for a, b in zip(map_grads, g_maps):
            a += lam * b
    if slow_sampler is not None:
        left, right, neighbor = slow_sampler.next()
        z, tape = _stack_forward(net, data.frames, np.concatenate([left, right]))
        n = len(left)
        parts["slow"], g_zi, g_zj = slowness_loss_features(
            z[:n], z[n:], neighbor, config.margin_slow, config.slowness_variant, reduction="mean"
        )
        g, _ = engine.backward(net, tape, np.concatenate([g_zi, g_zj]))
        lam = config.lambda_slow
        for a, b in zip(net_grads, g):
            a += lam * b
    return parts


def train_unsupervised(model: Model, pairs: PairSet, frames, config: TrainConfig, slow_pairs=None):
    """Equivariance-only (or slowness-only) training on unlabelled pairs."""
    data = TrainData(frames=frames, pairs=pairs, slow_pairs=slow_pairs)
    return train(model, data, config, supervised=False)


def train_joint(model: Model, data: TrainData, config: TrainConfig):
    """Softmax loss plus the method's regulariser(s), all stacks sharing one network."""
    return train(model, data, config, supervised=True)
