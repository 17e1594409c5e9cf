import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egoeq import engine, gradcheck, losses
from egoeq.engine import FullyConnected, Network
from egoeq.errors import DimensionError, InputError
from egoeq.losses import ClassifierHead, EquivMapSet


def identity_net(d):
    net = Network((d,), [FullyConnected(d, d)])
    net.params[0]["weight"][...] = np.eye(d)
    return net


class TestContrastive:
    def test_positive_equal(self):
        assert losses.contrastive_loss([1.0, 2.0], [1.0, 2.0], True, 1.0) == 0.0

    def test_negative_saturated(self):
        assert losses.contrastive_loss([0.0, 0.0], [3.0, 4.0], False, 1.0) == 0.0

    def test_negative_hinge(self):
        assert losses.contrastive_loss([0.0, 0.0], [0.4, 0.0], False, 1.0) == pytest.approx(0.6, abs=1e-15)

    def test_positive_is_distance(self):
        assert losses.contrastive_loss([0.0, 0.0], [3.0, 4.0], True, 1.0) == 5.0
        assert losses.contrastive_loss([0.0, 0.0], [3.0, -4.0], True, 1.0, norm="l1") == 7.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            losses.contrastive_loss([0.0], [0.0, 1.0], True, 1.0)

    def test_margin_positive(self):
        with pytest.raises(InputError):
            losses.contrastive_loss([0.0], [1.0], False, 0.0)

    @given(seed=st.integers(0, 10_000), margin=st.floats(0.1, 5.0))
    def test_nonnegative_and_bounded(self, seed, margin):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 8, 3))
        pos = rng.random(8) < 0.5
        vals, _, _ = losses.contrastive_terms(a, b, pos, margin)
        assert np.all(vals >= 0)
        assert np.all(vals[~pos] <= margin)


class TestEquiv:
    def test_collapse_penalised(self):
        maps = EquivMapSet(2, 3)
        maps.matrices[...] = 0.0
        z = np.zeros((4, 3))
        positive = np.array([True, False, True, False])
        loss, *_ = losses.equiv_loss_features(z, z, maps, np.array([0, 0, 1, 1]), positive, 0.7)
        assert loss == pytest.approx(2 * 0.7)
        naive, *_ = losses.naive_equiv_loss_features(z, z, maps, np.array([0, 0, 1, 1]))
        assert naive == 0.0

    def test_hand_positive(self):
        maps = EquivMapSet(1, 2)
        maps.matrices[0] = [[0.0, -1.0], [1.0, 0.0]]
        maps.biases[0] = [0.5, 0.0]
        loss, *_ = losses.equiv_loss_features(np.array([[1.0, 0.0]]), np.array([[3.5, 4.0]]), maps,
                                              np.array([0]), np.array([True]), 1.0)
        # M z_i + b = [0.5, 1]; distance to [3.5, 4] is 3 * sqrt(2)
        assert loss == pytest.approx(3.0 * math.sqrt(2.0), abs=1e-14)

    def test_mean_reduction(self, rng):
        maps = EquivMapSet(2, 3).init_identity_noise(0)
        zi, zj = rng.normal(size=(2, 5, 3))
        idx, pos = np.array([0, 1, 1, 0, 1]), np.array([True, False, True, True, False])
        s, *_ = losses.equiv_loss_features(zi, zj, maps, idx, pos, 1.0, "sum")
        m, *_ = losses.equiv_loss_features(zi, zj, maps, idx, pos, 1.0, "mean")
        assert m == pytest.approx(s / 5)

    def test_expand_all_maps(self):
        pair_idx, map_idx, positive = losses.expand_all_maps([2, 1], 3)
        assert pair_idx.tolist() == [0, 0, 0, 1, 1, 1]
        assert map_idx.tolist() == [0, 1, 2, 0, 1, 2]
        assert positive.tolist() == [False, True, False, True, False, False]

    def test_empty(self):
        with pytest.raises(InputError):
            losses.equiv_loss_features(np.zeros((0, 2)), np.zeros((0, 2)), EquivMapSet(1, 2), [], [], 1.0)


class TestSlowness:
    def test_hand_batch(self):
        zi = np.array([[0.0, 0.0], [0.0, 0.0]])
        zj = np.array([[3.0, 4.0], [0.3, 0.4]])
        neighbor = losses.neighbor_flags([0.0, 0.0], [0.05, 0.3], 0.1)
        assert neighbor.tolist() == [True, False]
        l2, *_ = losses.slowness_loss_features(zi, zj, neighbor, 1.0, "l2_drlim")
        l1, *_ = losses.slowness_loss_features(zi, zj, neighbor, 1.0, "l1_temporal")
        assert l2 == pytest.approx(5.0 + 0.5)
        assert l1 == pytest.approx(7.0 + 0.3)

    def test_identical_neighbours(self):
        z = np.ones((3, 2))
        assert losses.slowness_loss_features(z, z, np.ones(3, bool), 1.0)[0] == 0.0

    def test_coincident_non_neighbours(self):
        z = np.ones((1, 2))
        assert losses.slowness_loss_features(z, z, np.zeros(1, bool), 2.5)[0] == 2.5

    def test_window_roundoff(self):
        assert losses.neighbor_flags([0.1 * 3], [0.1 * 4], 0.1).tolist() == [True]

    def test_unknown_variant(self):
        with pytest.raises(InputError):
            losses.slowness_loss_features(np.ones((1, 2)), np.ones((1, 2)), [True], 1.0, "l3")


class TestSoftmax:
    def head(self, C):
        h = ClassifierHead(C, C)
        h.W[...] = np.eye(C)
        return h

    def test_uniform(self):
        loss, *_ = losses.softmax_loss_features(self.head(4), np.zeros((3, 4)), [0, 1, 3])
        assert loss == pytest.approx(math.log(4.0), abs=1e-15)
        assert math.log(4.0) == pytest.approx(1.386294, abs=1e-6)

    def test_hand_two_class(self):
        loss, *_ = losses.softmax_loss_features(self.head(2), np.array([[2.0, 0.0]]), [0])
        assert loss == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-15)
        assert loss == pytest.approx(0.126928, abs=1e-6)

    def test_saturation(self):
        loss, *_ = losses.softmax_loss_features(self.head(3), np.array([[50.0, 0.0, 0.0]]), [0])
        assert 0.0 <= loss < 1e-20
        big, *_ = losses.softmax_loss_features(self.head(3), np.array([[1000.0, 0.0, 0.0]]), [1])
        assert big == pytest.approx(1000.0)

    def test_label_range(self):
        with pytest.raises(InputError):
            losses.softmax_loss_features(self.head(2), np.zeros((1, 2)), [2])


class TestJoint:
    def setup(self):
        rng, net, maps, head, xi, xj = gradcheck._small_setup(3)
        labels = rng.integers(4, size=6)
        pairs = (xi, xj, np.array([0, 1, 0, 1, 0, 1]), np.array([True, False] * 3))
        return net, maps, head, xi, labels, pairs

    def test_lambda_zero_is_softmax(self):
        net, maps, head, x, labels, pairs = self.setup()
        total, parts, grads = losses.joint_loss(net, maps, head, (x, labels), pairs, 0.0, 1.0)
        ref, g_net, g_head = losses.softmax_loss(net, head, x, labels)
        assert total == ref
        for a, b in zip(grads, g_net + [np.zeros_like(p) for p in maps.parameters()] + g_head):
            np.testing.assert_array_equal(a, b)

    def test_no_labels_is_equiv(self):
        net, maps, head, x, labels, pairs = self.setup()
        total, parts, _ = losses.joint_loss(net, maps, head, (x[:0], labels[:0]), pairs, 1.0, 1.0)
        ref, *_ = losses.equiv_loss(net, maps, *pairs, 1.0)
        assert total == ref and parts["cls"] == 0.0

    def test_sum_of_parts(self):
        net, maps, head, x, labels, pairs = self.setup()
        total, parts, _ = losses.joint_loss(net, maps, head, (x, labels), pairs, 0.3, 1.0)
        cls, *_ = losses.softmax_loss(net, head, x, labels)
        eq, *_ = losses.equiv_loss(net, maps, *pairs, 1.0)
        assert total == pytest.approx(cls + 0.3 * eq, rel=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_loss_heads_match_finite_differences(seed):
    errs = gradcheck.check_losses(seed)
    assert set(errs) >= {"contrastive_l2", "contrastive_l1", "slowness", "equiv", "softmax", "joint"}
    assert max(errs.values()) < gradcheck.TOLERANCE


def test_shared_network_gradients_add(rng):
    # both stacks of a Siamese pair read the same parameter arrays
    net = identity_net(3)
    maps = EquivMapSet(1, 3)
    xi, xj = rng.normal(size=(2, 4, 3))
    _, g_net, _ = losses.equiv_loss(net, maps, xi, xj, np.zeros(4, int), np.ones(4, bool), 1.0)
    num = engine.numerical_gradient(
        lambda: losses.equiv_loss(net, maps, xi, xj, np.zeros(4, int), np.ones(4, bool), 1.0)[0], net.parameters())
    for a, n in zip(g_net, num):
        np.testing.assert_allclose(a, n, atol=1e-8)
