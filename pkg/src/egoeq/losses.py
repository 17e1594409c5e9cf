"""Loss heads on top of the feature network.

Every ``*_terms``/``*_features`` function works on feature arrays and returns
the loss together with its gradients, so the trainer can backpropagate
through the shared :class:`~egoeq.engine.Network`. Class labels are 0-based.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .errors import DimensionError, InputError
from .motion import within_gap


class EquivMapSet:
    """One learnable affine map ``z -> M_g z + b_g`` per motion pattern.

    Pattern ``g`` (1-based ID) is stored at index ``g - 1``.
    """

    def __init__(self, G, D):
        if G < 1 or D < 1:
            raise InputError(f"need G >= 1 and D >= 1, got G={G}, D={D}")
        self.matrices = np.tile(np.eye(D), (G, 1, 1))
        self.biases = np.zeros((G, D))
        self.version = 0

    @property
    def G(self):
        return self.matrices.shape[0]

    @property
    def D(self):
        return self.matrices.shape[1]

    def parameters(self):
        return [self.matrices, self.biases]

    def bump(self):
        self.version += 1

    def init_identity_noise(self, seed, noise=0.1):
        """Identity plus uniform noise of ``noise`` times the Glorot bound."""
        rng = np.random.default_rng(seed)
        bound = noise * math.sqrt(6.0 / (2 * self.D))
        self.matrices[...] = np.eye(self.D) + rng.uniform(-bound, bound, size=self.matrices.shape)
        self.biases[...] = 0.0
        self.bump()
        return self

    def affine(self, g):
        """``(matrix, bias)`` for 1-based pattern ``g``."""
        return self.matrices[g - 1].copy(), self.biases[g - 1].copy()

    def apply(self, map_idx, z):
        """Apply map ``map_idx[n]`` (0-based) to row ``z[n]``."""
        m = self.matrices[map_idx]
        return np.einsum("nij,nj->ni", m, z) + self.biases[map_idx]


class ClassifierHead:
    """Linear softmax classifier, ``logits = z W + bias`` with ``W`` of shape (D, C)."""

    def __init__(self, D, C):
        if D < 1 or C < 2:
            raise InputError(f"need D >= 1 and C >= 2, got D={D}, C={C}")
        self.W = np.zeros((D, C))
        self.bias = np.zeros(C)
        self.version = 0

    @property
    def C(self):
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.bias]

    def bump(self):
        self.version += 1

    def init_xavier(self, seed):
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / sum(self.W.shape))
        self.W[...] = rng.uniform(-bound, bound, size=self.W.shape)
        self.bias[...] = 0.0
        self.bump()
        return self

    def logits(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.W.shape[0]:
            raise DimensionError(f"features {z.shape} do not match classifier input dim {self.W.shape[0]}")
        return z @ self.W + self.bias


# --------------------------------------------------------------------------
# Contrastive family
# --------------------------------------------------------------------------


def _distance(diff, norm):
    if norm == "l2":
        d = np.sqrt((diff * diff).sum(axis=1))
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
    elif norm == "l1":
        d = np.abs(diff).sum(axis=1)
        unit = np.sign(diff)
    else:
        raise InputError(f"unknown distance {norm!r}")
    return d, unit


def contrastive_terms(a, b, positive, margin, norm="l2"):
    """Per-row contrastive loss and gradients.

    ``d(a, b)`` for positive rows, ``max(margin - d(a, b), 0)`` otherwise.
    Returns ``(losses, grad_a, grad_b)``; the gradient at ``d = 0`` is taken
    as zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if margin <= 0:
        raise InputError("margin must be positive")
    positive = np.asarray(positive, dtype=bool)
    d, unit = _distance(a - b, norm)
    active_neg = ~positive & (d < margin)
    losses = np.where(positive, d, np.maximum(margin - d, 0.0))
    coef = np.where(positive, 1.0, np.where(active_neg, -1.0, 0.0))
    grad_a = coef[:, None] * unit
    return losses, grad_a, -grad_a


def contrastive_loss(a, b, is_positive, delta, norm="l2"):
    """Contrastive loss of a single feature pair."""
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise DimensionError(f"feature lengths differ: {a.shape[1]} vs {b.shape[1]}")
    return float(contrastive_terms(a, b, [bool(is_positive)], delta, norm)[0][0])


def equiv_loss_features(zi, zj, maps: EquivMapSet, map_idx, positive, delta, reduction="sum"):
    """Equivariance loss on precomputed features.

    Row ``n`` contributes ``d_g(M_g zi[n] + b_g, zj[n])`` with
    ``g = map_idx[n]`` (0-based) and positive/negative mode from
    ``positive[n]``.

    Returns
    -------
    loss : float
    grad_zi, grad_zj : ndarray
    grad_maps : list of ndarray
        Gradients for ``maps.parameters()``.
    """
    map_idx = np.asarray(map_idx, dtype=np.int64)
    n = len(map_idx)
    if n == 0:
        raise InputError("empty equivariance batch")
    if zi.shape != zj.shape or zi.shape != (n, maps.D):
        raise DimensionError(f"features {zi.shape}/{zj.shape} incompatible with {n} rows of D={maps.D}")
    mapped = maps.apply(map_idx, zi)
    losses, g_mapped, g_zj = contrastive_terms(mapped, zj, positive, delta)
    scale = 1.0 if reduction == "sum" else 1.0 / n
    g_mapped *= scale
    g_zj *= scale
    grad_zi = np.einsum("nij,ni->nj", maps.matrices[map_idx], g_mapped)
    grad_m = np.zeros_like(maps.matrices)
    grad_b = np.zeros_like(maps.biases)
    np.add.at(grad_m, map_idx, g_mapped[:, :, None] * zi[:, None, :])
    np.add.at(grad_b, map_idx, g_mapped)
    return float(losses.sum() * scale), grad_zi, g_zj, [grad_m, grad_b]


def expand_all_maps(patterns, G):
    """Rows for the full objective: every pair against every map.

    ``patterns`` holds 1-based pattern IDs. Returns ``(pair_idx, map_idx,
    positive)``.
    """
    patterns = np.asarray(patterns, dtype=np.int64)
    pair_idx = np.repeat(np.arange(len(patterns)), G)
    map_idx = np.tile(np.arange(G), len(patterns))
    return pair_idx, map_idx, patterns[pair_idx] == map_idx + 1


def _forward_pairs(net, xi, xj):
    # one forward over both halves: the two Siamese stacks share ``net``
    n = len(xi)
    feats, tape = engine.forward(net, np.concatenate([xi, xj], axis=0))
    return feats[:n], feats[n:], tape


def _backward_pairs(net, tape, g_zi, g_zj):
    grads, _ = engine.backward(net, tape, np.concatenate([g_zi, g_zj], axis=0))
    return grads


def equiv_loss(net, maps, xi, xj, map_idx, positive, delta, reduction="sum"):
    """Equivariance loss through the network; returns ``(loss, net_grads, map_grads)``."""
    zi, zj, tape = _forward_pairs(net, xi, xj)
    loss, g_zi, g_zj, g_maps = equiv_loss_features(zi, zj, maps, map_idx, positive, delta, reduction)
    return loss, _backward_pairs(net, tape, g_zi, g_zj), g_maps


def naive_equiv_loss_features(zi, zj, maps, map_idx, reduction="sum"):
    """Positives-only objective: ``sum ||M_g zi + b_g - zj||``.

    Admits the all-zero solution; kept for the collapse demonstration.
    """
    ones = np.ones(len(map_idx), dtype=bool)
    return equiv_loss_features(zi, zj, maps, map_idx, ones, 1.0, reduction)


def slowness_loss_features(zi, zj, neighbor, margin, variant="l2_drlim", reduction="sum"):
    """Temporal-coherence contrastive loss; ``l1_temporal`` or ``l2_drlim``."""
    norm = {"l1_temporal": "l1", "l2_drlim": "l2"}.get(variant)
    if norm is None:
        raise InputError(f"unknown slowness variant {variant!r}")
    if len(zi) == 0:
        raise InputError("empty slowness batch")
    losses, g_zi, g_zj = contrastive_terms(zi, zj, neighbor, margin, norm)
    scale = 1.0 if reduction == "sum" else 1.0 / len(zi)
    return float(losses.sum() * scale), g_zi * scale, g_zj * scale


def neighbor_flags(ti, tj, T):
    """``1(|t_i - t_j| <= T)``, tolerant to timestamp round-off."""
    return within_gap(np.abs(np.asarray(ti, dtype=np.float64) - np.asarray(tj, dtype=np.float64)), T)


def slowness_loss(net, xi, xj, ti, tj, variant, T, margin, reduction="sum"):
    """Slowness loss through the network; returns ``(loss, net_grads)``."""
    zi, zj, tape = _forward_pairs(net, xi, xj)
    loss, g_zi, g_zj = slowness_loss_features(zi, zj, neighbor_flags(ti, tj, T), margin, variant, reduction)
    return loss, _backward_pairs(net, tape, g_zi, g_zj)


# --------------------------------------------------------------------------
# Softmax classification
# --------------------------------------------------------------------------


def softmax_loss_features(head: ClassifierHead, z, labels):
    """Mean negative log-likelihood of the true classes.

    Returns ``(loss, grad_z, [grad_W, grad_bias])``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InputError("empty labeled batch")
    if labels.min() < 0 or labels.max() >= head.C:
        raise InputError(f"label out of range [0, {head.C})")
    logits = head.logits(z)
    if len(labels) != len(logits):
        raise DimensionError(f"{len(labels)} labels for {len(logits)} feature rows")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float((log_norm - shifted[rows, labels]).mean())
    probs = np.exp(shifted - log_norm[:, None])
    g_logits = probs
    g_logits[rows, labels] -= 1.0
    g_logits /= len(labels)
    return loss, g_logits @ head.W.T, [z.T @ g_logits, g_logits.sum(axis=0)]


def softmax_loss(net, head, x, labels):
    """Softmax loss through the network; returns ``(loss, net_grads, head_grads)``."""
    z, tape = engine.forward(net, x)
    loss, g_z, g_head = softmax_loss_features(head, z, labels)
    grads, _ = engine.backward(net, tape, g_z)
    return loss, grads, g_head


def joint_loss(net, maps, head, labeled, pairs, lam, delta):
    """``L_c + lam * L_e`` and gradients for ``(net, maps, head)``.

    ``labeled`` is ``(x, labels)`` (possibly empty) and ``pairs`` is
    ``(xi, xj, map_idx, positive)``. Returns ``(total, parts, grads)`` with
    ``parts = {"cls": L_c, "equiv": L_e}`` and ``grads`` aligned with
    ``net.parameters() + maps.parameters() + head.parameters()``.
    """
    x, labels = labeled
    net_grads = [np.zeros_like(p) for p in net.parameters()]
    map_grads = [np.zeros_like(p) for p in maps.parameters()]
    head_grads = [np.zeros_like(p) for p in head.parameters()]
    parts = {"cls": 0.0, "equiv": 0.0}
    if len(labels):
        parts["cls"], g_net, head_grads = softmax_loss(net, head, x, labels)
        net_grads = [a + b for a, b in zip(net_grads, g_net)]
    xi, xj, map_idx, positive = pairs
    if len(map_idx):
        parts["equiv"], g_net, g_maps = equiv_loss(net, maps, xi, xj, map_idx, positive, delta)
        net_grads = [a + lam * b for a, b in zip(net_grads, g_net)]
        map_grads = [lam * g for g in g_maps]
    total = parts["cls"] + lam * parts["equiv"]
    return total, parts, net_grads + map_grads + head_grads
