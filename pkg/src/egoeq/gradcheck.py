"""Finite-difference checks of every layer kind and every loss head on small random nets."""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import AvgPool, Conv, FullyConnected, MaxPool, Network, ReLU
from .losses import (
    ClassifierHead,
    EquivMapSet,
    contrastive_terms,
    equiv_loss,
    joint_loss,
    slowness_loss,
    softmax_loss,
)

TOLERANCE = 1e-4


def _worst(analytic, numeric):
    # entries whose true gradient is exactly zero (e.g. a bias that cancels in a
    # distance) only carry round-off, so the floor scales with the largest gradient
    scale = max(float(np.abs(a).max()) for a in analytic if a.size)
    floor = max(1e-8, 1e-6 * scale)
    return max(float(engine.relative_error(a, n, floor).max()) for a, n in zip(analytic, numeric) if a.size)


def _layer_nets():
    """One small net per layer kind, each ending in a fully connected readout."""
    return {
        "FullyConnected": Network((5,), [FullyConnected(5, 4), FullyConnected(4, 3)]),
        "ReLU": Network((5,), [FullyConnected(5, 6), ReLU(), FullyConnected(6, 3)]),
        "Conv": Network((2, 7, 7), [Conv(2, 3, 3, stride=2), FullyConnected(27, 3)]),
        "MaxPool": Network((2, 6, 6), [Conv(2, 2, 3), MaxPool(2, 2), FullyConnected(8, 3)]),
        "AvgPool": Network((2, 6, 6), [Conv(2, 2, 3), AvgPool(3, 1), FullyConnected(8, 3)]),
    }


def check_layers(seed=0, h=1e-5):
    """Max relative error per layer kind under a random linear readout loss."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, (kind, net) in enumerate(_layer_nets().items()):
        engine.init_xavier(net, seed + k)
        for p in net.parameters():
            p += rng.normal(0.0, 0.1, size=p.shape)
        batch = rng.normal(size=(3,) + net.input_shape)
        w = rng.normal(size=(3, net.feature_dim))

        def loss_fn(z, w=w):
            return float((w * z).sum()), w

        out[kind] = engine.finite_diff_check(net, loss_fn, batch, h)
    return out


def _small_setup(seed):
    rng = np.random.default_rng(seed)
    net = engine.init_xavier(Network((6,), [FullyConnected(6, 5), ReLU(), FullyConnected(5, 3)]), seed)
    maps = EquivMapSet(2, 3).init_identity_noise(seed + 1, noise=0.5)
    head = ClassifierHead(3, 4).init_xavier(seed + 2)
    xi = rng.normal(size=(6, 6))
    xj = rng.normal(size=(6, 6))
    return rng, net, maps, head, xi, xj


def check_losses(seed=0, h=1e-5):
    """Max relative error per loss head: contrastive, slowness, equivariance, softmax, joint."""
    rng, net, maps, head, xi, xj = _small_setup(seed)
    out = {}

    a = rng.normal(size=(6, 3))
    b = a + rng.normal(scale=0.3, size=(6, 3))
    positive = np.array([True, False, True, False, False, True])
    for norm in ("l2", "l1"):
        _, ga, gb = contrastive_terms(a, b, positive, 1.0, norm)
        num = engine.numerical_gradient(lambda: float(contrastive_terms(a, b, positive, 1.0, norm)[0].sum()), [a, b], h)
        out[f"contrastive_{norm}"] = _worst([ga, gb], num)

    ti = np.arange(6) * 0.1
    tj = ti + np.array([0.1, 0.5, 0.1, 0.3, 0.6, 0.05])
    _, g = slowness_loss(net, xi, xj, ti, tj, "l2_drlim", 0.15, 1.0)
    num = engine.numerical_gradient(
        lambda: slowness_loss(net, xi, xj, ti, tj, "l2_drlim", 0.15, 1.0)[0], net.parameters(), h)
    out["slowness"] = _worst(g, num)

    map_idx = np.array([0, 1, 0, 1, 0, 1])
    _, g_net, g_maps = equiv_loss(net, maps, xi, xj, map_idx, positive, 1.0)
    params = net.parameters() + maps.parameters()
    num = engine.numerical_gradient(
        lambda: equiv_loss(net, maps, xi, xj, map_idx, positive, 1.0)[0], params, h)
    out["equiv"] = _worst(g_net + g_maps, num)

    labels = rng.integers(4, size=6)
    _, g_net, g_head = softmax_loss(net, head, xi, labels)
    params = net.parameters() + head.parameters()
    num = engine.numerical_gradient(lambda: softmax_loss(net, head, xi, labels)[0], params, h)
    out["softmax"] = _worst(g_net + g_head, num)

    pairs = (xi, xj, map_idx, positive)
    _, _, grads = joint_loss(net, maps, head, (xi, labels), pairs, 0.7, 1.0)
    params = net.parameters() + maps.parameters() + head.parameters()
    num = engine.numerical_gradient(
        lambda: joint_loss(net, maps, head, (xi, labels), pairs, 0.7, 1.0)[0], params, h)
    out["joint"] = _worst(grads, num)
    return out


def run_all(seed=0, h=1e-5):
    """All checks as ``{name: max relative error}``."""
    results = {f"layer.{k}": v for k, v in check_layers(seed, h).items()}
    results.update({f"loss.{k}": v for k, v in check_losses(seed, h).items()})
    return results
