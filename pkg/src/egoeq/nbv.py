"""Next-best-view selection by minimum predicted class entropy.

For every candidate motion g a k-NN classifier votes on the concatenated
pair ``[z(x), z(gx)]``. Given a starting view ``x0``, the feature of each
unseen neighbour view is predicted as ``M'_g z(x0)`` and the motion whose
predicted pair gives the least uncertain vote histogram is chosen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError
from .evaluation import AffineMap

DEFAULT_K = 25
SMALL_BANK_K = 5


@dataclass
class PairClassifier:
    motion: str
    bank: np.ndarray
    labels: np.ndarray
    k: int
    num_classes: int

    def __post_init__(self):
        self.bank = np.asarray(self.bank, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.k < 1:
            raise InputError("k must be at least 1")
        if self.bank.ndim != 2 or not len(self.bank):
            raise InputError(f"classifier for {self.motion!r} has an empty bank")
        if len(self.labels) != len(self.bank):
            raise DimensionError("bank and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError("bank labels outside [0, num_classes)")

    @property
    def dim(self):
        return self.bank.shape[1]


def choose_k(labels, requested=None):
    """``requested`` if given, else 25, dropping to 5 when some class has fewer
    than 25 bank entries. Returns ``(k, flagged)``."""
    if requested is not None:
        return int(requested), False
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    counts = counts[counts > 0]
    if counts.min() < DEFAULT_K:
        return SMALL_BANK_K, True
    return DEFAULT_K, False


def build_pair_classifier(motion, z_first, z_second, labels, k, num_classes) -> PairClassifier:
    """Bank of ``[z(x), z(gx)]`` rows with the class of ``x``."""
    z_first = np.asarray(z_first, dtype=np.float64)
    z_second = np.asarray(z_second, dtype=np.float64)
    if not len(z_first):
        raise InputError(f"no training pairs for motion {motion!r}")
    if z_first.shape != z_second.shape:
        raise DimensionError(f"pair feature shapes differ: {z_first.shape} vs {z_second.shape}")
    return PairClassifier(motion, np.hstack([z_first, z_second]), labels, k, num_classes)


def knn_probs(bank, labels, query, k, num_classes):
    """Vote histogram of the ``k`` nearest bank rows.

    Rows tied with the k-th distance share the slots left after the strictly
    closer rows, so the result does not depend on the bank order.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (bank.shape[1],):
        raise DimensionError(f"query has shape {query.shape}, bank rows have {bank.shape[1]}")
    d = ((bank - query) ** 2).sum(axis=1)
    k = min(k, len(bank))
    kth = np.partition(d, k - 1)[k - 1]
    closer = d < kth
    tied = d == kth
    weights = closer.astype(np.float64)
    weights[tied] = (k - closer.sum()) / tied.sum()
    return np.bincount(labels, weights=weights, minlength=num_classes) / k


def predict_class_probs(clf: PairClassifier, query):
    return knn_probs(clf.bank, clf.labels, query, clf.k, clf.num_classes)


def entropy(p):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class CandidateView:
    """A candidate motion: its feature-space map and pair classifier."""

    name: str
    map: AffineMap
    classifier: PairClassifier


def select_view(z0, candidates):
    """Index of the candidate with least predicted entropy (first on ties) and all entropies."""
    if not candidates:
        raise InputError("no candidate views")
    z0 = np.asarray(z0, dtype=np.float64)
    ent = []
    for c in candidates:
        if c.classifier is None:
            raise InputError(f"missing classifier for candidate {c.name!r}")
        pred = c.map(z0)
        ent.append(entropy(predict_class_probs(c.classifier, np.concatenate([z0, pred]))))
    ent = np.array(ent)
    return int(np.argmin(ent)), ent


def tie_credit(p, label):
    """1/m if ``label`` is one of the m most-voted classes, else 0."""
    p = np.asarray(p)
    top = np.flatnonzero(p == p.max())
    return 1.0 / len(top) if label in top else 0.0


@dataclass
class NbvSample:
    """Starting frame row, its class and the row reached by each candidate motion (None if absent)."""

    row: int
    label: int
    views: dict


@dataclass
class NbvReport:
    acc_1view: float | None
    acc_2view: float | None
    acc_2view_predicted: float | None
    n_evaluated: int
    n_skipped: int
    k: int
    k_flagged: bool
    candidates: list
    samples: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def evaluate_nbv(z, samples, candidates, single_bank, single_labels, k, num_classes, k_flagged=False):
    """One-view vs selected-two-view accuracy (percent) over ``samples``.

    One-view accuracy is k-NN on ``z(x0)`` against ``single_bank``. Two-view
    accuracy classifies the observed pair ``[z(x0), z(g* x0)]`` with the
    selected motion's classifier; the variant that classifies the predicted
    pair is reported as ``acc_2view_predicted``. Samples whose selected view
    is absent are skipped and counted. Ties among top-voted classes earn
    fractional credit, so uninformative features score exactly 1/C.
    """
    if not len(samples):
        raise InputError("empty NBV test set")
    z = np.asarray(z, dtype=np.float64)
    single_bank = np.asarray(single_bank, dtype=np.float64)
    single_labels = np.asarray(single_labels, dtype=np.int64)
    one, two, pred_two = [], [], []
    per_sample = []
    skipped = 0
    for s in samples:
        z0 = z[s.row]
        best, ent = select_view(z0, candidates)
        chosen = candidates[best]
        target = s.views.get(chosen.name)
        entry = {"row": int(s.row), "label": int(s.label), "selected": chosen.name,
                 "entropies": [float(e) for e in ent]}
        if target is None:
            skipped += 1
            entry["skipped"] = True
            per_sample.append(entry)
            continue
        p1 = knn_probs(single_bank, single_labels, z0, k, num_classes)
        p2 = predict_class_probs(chosen.classifier, np.concatenate([z0, z[target]]))
        pp = predict_class_probs(chosen.classifier, np.concatenate([z0, chosen.map(z0)]))
        one.append(tie_credit(p1, s.label))
        two.append(tie_credit(p2, s.label))
        pred_two.append(tie_credit(pp, s.label))
        entry.update(credit_1view=one[-1], credit_2view=two[-1], credit_2view_predicted=pred_two[-1])
        per_sample.append(entry)

    def pct(v):
        return 100.0 * math.fsum(v) / len(v) if v else None

    return NbvReport(pct(one), pct(two), pct(pred_two), len(one), skipped, int(k), bool(k_flagged),
                     [c.name for c in candidates], per_sample)


def view_rows(poses, episodes, rows, steps, decimals=6):
    """For each row, the row in the same episode whose pose differs by each step.

    ``steps`` maps a motion name to its pose-delta vector. Returns a list of
    ``{name: row or None}``.
    """
    index = {}
    for r in range(len(poses)):
        index[(int(episodes[r]),) + tuple(np.round(poses[r], decimals).tolist())] = r
    out = []
    for r in rows:
        views = {}
        for name, step in steps.items():
            key = (int(episodes[r]),) + tuple(np.round(poses[r] + np.asarray(step), decimals).tolist())
            views[name] = index.get(key)
        out.append(views)
    return out
