import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egoeq import evaluation as ev
from egoeq.errors import DimensionError, InputError
from egoeq.evaluation import AffineMap
from egoeq.training import PairSet


def mann_whitney_auc(scores, labels):
    """P(positive outscores negative) + half the tie probability, by pair counting."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestFitMap:
    def test_identity(self, rng):
        z = rng.normal(size=(20, 4))
        m = ev.fit_equiv_map(z, z)
        np.testing.assert_allclose(m.matrix, np.eye(4), atol=1e-12)
        np.testing.assert_allclose(m.bias, 0.0, atol=1e-12)
        assert not m.ridge

    @given(seed=st.integers(0, 10_000), D=st.integers(1, 8))
    def test_plant_and_recover(self, seed, D):
        rng = np.random.default_rng(seed)
        planted = rng.normal(size=(D, D)) + 2 * np.eye(D)
        bias = rng.normal(size=D)
        zj = rng.normal(size=(2 * D + 1, D))
        m = ev.fit_equiv_map(zj @ planted.T + bias, zj)
        err = np.linalg.norm(m.matrix - planted) / np.linalg.norm(planted)
        assert err < 1e-6
        np.testing.assert_allclose(m.bias, bias, atol=1e-6)

    def test_too_few_pairs(self, rng):
        z = rng.normal(size=(4, 4))
        with pytest.raises(InputError, match="at least 5"):
            ev.fit_equiv_map(z, z)

    def test_singular_flagged(self):
        z = np.zeros((10, 3))
        z[:, 0] = np.arange(10)
        m = ev.fit_equiv_map(z, z)
        assert m.ridge
        np.testing.assert_allclose(m(z), z, atol=1e-6)


class TestRho:
    def test_identity_is_one(self, rng):
        zi, zj = rng.normal(size=(2, 30, 5))
        assert ev.rho(zi, zj, AffineMap.identity(5)).rho == pytest.approx(1.0, abs=1e-15)

    def test_exact_map_is_zero(self, rng):
        m = AffineMap(rng.normal(size=(3, 3)), rng.normal(size=3))
        zj = rng.normal(size=(10, 3))
        assert ev.rho(m(zj), zj, m).rho == pytest.approx(0.0, abs=1e-14)

    def test_hand_ratio(self):
        # numerator |[0.3, 0] - 0| = 0.3, denominator |[0.3, 0] - [0.3, 0.6]| = 0.6
        m = AffineMap(np.zeros((2, 2)), np.zeros(2))
        r = ev.rho(np.array([[0.3, 0.0]]), np.array([[0.3, 0.6]]), m)
        assert r.rho == pytest.approx(0.5)
        assert (r.n_used, r.n_skipped) == (1, 0)

    def test_degenerate_pairs_skipped(self):
        zi = np.array([[1.0, 0.0], [2.0, 2.0]])
        zj = np.array([[1.0, 0.0], [2.0, 3.0]])
        r = ev.rho(zi, zj, AffineMap(np.eye(2), np.array([0.0, -0.5])))
        assert (r.rho, r.n_used, r.n_skipped) == (0.5, 1, 1)
        assert not ev.rho(zi[:1], zj[:1], AffineMap.identity(2)).defined

    @given(seed=st.integers(0, 10_000), c=st.sampled_from([0.1, 10.0, 3.7]))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        zj = rng.normal(size=(40, 3))
        zi = zj @ rng.normal(size=(3, 3)).T + 0.3 * rng.normal(size=(40, 3))
        base = ev.rho(zi[20:], zj[20:], ev.fit_equiv_map(zi[:20], zj[:20])).rho
        scaled = ev.rho(c * zi[20:], c * zj[20:], ev.fit_equiv_map(c * zi[:20], c * zj[:20])).rho
        assert abs(scaled - base) < 1e-10


class TestCompose:
    def test_identity_neutral(self, rng):
        m = AffineMap(rng.normal(size=(3, 3)), rng.normal(size=3))
        for c in (ev.compose_maps([AffineMap.identity(3), m]), ev.compose_maps([m, AffineMap.identity(3)])):
            np.testing.assert_allclose(c.matrix, m.matrix)
            np.testing.assert_allclose(c.bias, m.bias)

    def test_hand_product(self):
        a = AffineMap(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        b = AffineMap(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.0, 2.0]))
        c = ev.compose_maps([a, b])  # b first
        np.testing.assert_array_equal(c.matrix, [[2.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(c.bias, [5.0, 2.0])
        z = np.array([3.0, -1.0])
        np.testing.assert_array_equal(c(z), a(b(z)))

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ev.compose_maps([AffineMap.identity(2), AffineMap.identity(3)])


class TestReports:
    @pytest.fixture
    def linear_pairs(self, rng):
        # rows 0..59 start states; motion 1 maps row r to 60 + r, motion 2 maps 60 + r to 120 + r
        D = 3
        t1, t2 = rng.normal(size=(2, D, D)) + 2 * np.eye(D)
        z0 = rng.normal(size=(60, D))
        z = np.concatenate([z0, z0 @ t1.T, z0 @ t1.T @ t2.T])
        r = np.arange(60)
        pairs = PairSet(np.r_[r, r + 60], np.r_[r + 60, r + 120], np.r_[np.ones(60, int), 2 * np.ones(60, int)])
        return z, pairs

    def test_equiv_report_exact(self, linear_pairs):
        z, pairs = linear_pairs
        rep = ev.equiv_report(z, pairs, {1: "a", 2: "b"}, composites=[(1, 2)])
        kinds = {m.name: m for m in rep.motions}
        assert kinds["a"].rho < 1e-10 and kinds["b"].rho < 1e-10
        assert kinds["a"].n_fit + kinds["a"].n_measure == 60
        assert kinds["a+b"].kind == "composite" and kinds["a+b"].rho < 1e-10

    def test_fit_measure_disjoint(self):
        fit, meas = ev.split_disjoint(21, [3, 1])
        assert not set(fit) & set(meas)
        assert sorted(np.r_[fit, meas]) == list(range(21))

    def test_view_set_report(self, rng):
        D = 3
        maps = {n: AffineMap(rng.normal(size=(D, D)) + 2 * np.eye(D), rng.normal(size=D)) for n in "ab"}
        z0 = rng.normal(size=(40, D))
        zv = np.stack([maps["a"](z0), maps["b"](z0), maps["b"](maps["a"](z0)),
                       maps["a"](z0) + rng.normal(size=(40, D))], axis=1)
        rep = ev.view_set_report(z0, zv, ["a", "b", "a+b", "c"], learned={"a": maps["a"], "b": None})
        by = {m.name: m for m in rep.motions}
        assert by["a"].rho < 1e-10 and by["a"].rho_learned < 1e-10
        assert by["b"].rho_learned is None
        assert by["a+b"].rho < 1e-10 and by["a+b"].rho_direct < 1e-10
        assert by["c"].rho > 0.1
        assert rep.rho_composite == by["a+b"].rho

    def test_view_set_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            ev.view_set_report(rng.normal(size=(10, 2)), rng.normal(size=(10, 3, 2)), ["a", "b"])


class TestRecognition:
    def test_hand_example(self):
        logits = np.array([[3.0, 1.0, 2.0], [0.0, 0.0, 5.0], [1.0, 1.0, 0.0]])
        labels = [0, 0, 1]
        # row 0 right, row 1 wrong, row 2 loses the tie to class 0
        assert ev.recognition_accuracy(logits, labels, 1) == pytest.approx(100 / 3)
        assert ev.topk_correct(logits, labels, 2).tolist() == [True, True, True]

    def test_top_c_is_everything(self, rng):
        logits = rng.normal(size=(50, 7))
        assert ev.recognition_accuracy(logits, rng.integers(7, size=50), 7) == 100.0

    def test_chance(self, rng):
        labels = rng.integers(25, size=20000)
        acc = ev.recognition_accuracy(rng.normal(size=(20000, 25)), labels)
        assert acc == pytest.approx(4.0, abs=0.5)

    def test_empty(self):
        with pytest.raises(InputError):
            ev.recognition_accuracy(np.zeros((0, 3)), [])

    def test_mean_stderr(self):
        mean, se = ev.mean_stderr([1.0, 2.0, 3.0, 4.0, 5.0])
        assert mean == 3.0
        assert se == pytest.approx(np.sqrt(2.5) / np.sqrt(5))
        assert ev.mean_stderr([7.0]) == (7.0, 0.0)


class TestRoc:
    def test_hand_scores(self):
        scores, labels = [0.1, 0.2, 0.3, 0.4], [True, False, True, False]
        assert ev.roc_curve(scores, labels).auroc == pytest.approx(mann_whitney_auc(scores, labels))
        assert mann_whitney_auc(scores, labels) == 0.25
        # as distances (smaller means neighbour) the same labels score 0.75
        dist = ev.slowness_auroc(np.array(scores)[:, None], np.zeros((4, 1)), labels)
        assert dist.auroc == pytest.approx(0.75)

    def test_separated(self):
        assert ev.roc_curve([0.9, 0.8, 0.1], [True, True, False]).auroc == 1.0

    def test_all_equal(self):
        assert ev.roc_curve([0.5] * 6, [True, False] * 3).auroc == 0.5

    def test_one_class_undefined(self):
        rep = ev.roc_curve([0.1, 0.2], [True, True])
        assert rep.auroc is None and not rep.defined

    def test_curve_endpoints(self, rng):
        rep = ev.roc_curve(rng.normal(size=30), rng.random(30) < 0.4)
        assert rep.thresholds[0] == np.inf
        assert (rep.tpr[0], rep.fpr[0], rep.tpr[-1], rep.fpr[-1]) == (0.0, 0.0, 1.0, 1.0)
        assert np.all(np.diff(rep.tpr) >= 0) and np.all(np.diff(rep.fpr) >= 0)

    @given(seed=st.integers(0, 10_000), n=st.integers(2, 40), levels=st.integers(1, 6))
    def test_matches_pair_counting_and_antisymmetry(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        scores = rng.integers(levels, size=n).astype(float)
        labels = np.arange(n) % 2 == 0
        rng.shuffle(labels)
        auc = ev.roc_curve(scores, labels).auroc
        assert auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)
        assert ev.roc_curve(-scores, labels).auroc == pytest.approx(1.0 - auc, abs=1e-12)


class TestAnalogy:
    def test_identical_difference_ranks_first(self, rng):
        z = rng.normal(size=(6, 2))
        z[5] = z[4] - (z[0] - z[1])
        res = ev.analogy_nn(z, z, ([2, 0, 4, 3], [3, 1, 5, 2]), (0, 1), K=1)
        assert res.feature_neighbors == [(4, 5)]
        assert res.feature_distances[0] == pytest.approx(0.0, abs=1e-12)

    def test_hand_ranking(self):
        z = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [4.0, 5.0], [0.0, 3.0], [0.0, 0.0]])
        pixels = np.zeros((6, 1))
        # query difference [-1, 0]; candidates give [0, 3] (dist sqrt 10) and [1, 0] (dist 2)
        res = ev.analogy_nn(z, pixels, ([4, 2], [5, 3]), (0, 1), K=2)
        assert res.feature_neighbors == [(2, 3), (4, 5)]
        np.testing.assert_allclose(res.feature_distances, [2.0, np.sqrt(10.0)])

    def test_truncated(self, rng):
        z = rng.normal(size=(4, 2))
        res = ev.analogy_nn(z, z, ([0, 2], [1, 3]), (0, 1), K=5)
        assert res.truncated and res.feature_neighbors == [(2, 3)]
