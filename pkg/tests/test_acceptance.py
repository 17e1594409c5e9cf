"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the whole module takes a few
minutes on a laptop CPU.
"""

import itertools
import json
import time

import numpy as np
import pytest

from egoeq import cli, datasets, evaluation, gradcheck, motion, pipeline, training
from egoeq.engine import AvgPool, Conv, FullyConnected, MaxPool, Network, ReLU
from egoeq.evaluation import AffineMap

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    """Print ``AC<n> PASS|FAIL: detail`` past pytest's capture, then assert."""
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nAC{n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


def four_directions(ds):
    st = ds.meta["atomic_steps"]
    return motion.declare_patterns({
        "up": st["up"], "down": [-v for v in st["up"]],
        "right": st["right"], "left": [-v for v in st["right"]],
    })


def mlp(hidden, D):
    return Network((64,), [FullyConnected(64, hidden), ReLU(), FullyConnected(hidden, D)])


# --------------------------------------------------------------------------


def test_ac1_gradient_exactness(verdict):
    t0 = time.perf_counter()
    errors = gradcheck.run_all(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    kinds = {"layer.FullyConnected", "layer.ReLU", "layer.Conv", "layer.MaxPool", "layer.AvgPool",
             "loss.contrastive_l2", "loss.equiv", "loss.softmax", "loss.joint"}
    ok = kinds <= set(errors) and errors[worst] < 1e-4 and elapsed < 5.0
    verdict(1, ok, f"max relative error {errors[worst]:.2e} ({worst}) over {len(errors)} checks in {elapsed:.2f}s")


def test_ac2_degenerate_collapse(verdict):
    t0 = time.perf_counter()
    ds, _ = datasets.generate_dataset({"kind": "linear", "start_jitter_deg": 180.0}, 0)
    pm = four_directions(ds)
    pairs = training.mine_pairs(ds, pm, 1e9, ds.rows("train"), both_directions=True)
    ratios = {}
    for negatives in (False, True):
        model = training.build_model(mlp(32, 4), pm.G, 0, 0)
        before = np.linalg.norm(model.features(ds.frames), axis=1).mean()
        cfg = training.TrainConfig(method="equiv", iterations=2000, learning_rate=0.03, seed=0, negatives=negatives)
        training.train_unsupervised(model, pairs, ds.frames, cfg)
        ratios[negatives] = np.linalg.norm(model.features(ds.frames), axis=1).mean() / before
    elapsed = time.perf_counter() - t0
    ok = ratios[False] < 0.01 and ratios[True] > 0.1 and elapsed < 60
    verdict(2, ok, f"feature norm ratio naive {ratios[False]:.2e} (< 0.01), with negatives "
                   f"{ratios[True]:.3f} (> 0.1), {elapsed:.0f}s")


def test_ac3_unsupervised_equivariance(verdict):
    t0 = time.perf_counter()
    world = {"kind": "linear", "noise_sigma": 0.0, "start_jitter_deg": 180.0, "train_episodes_per_class": 10}
    ds, w = datasets.generate_dataset(world, 0)
    pm = four_directions(ds)
    pairs = training.mine_pairs(ds, pm, 1e9, ds.rows("train"), both_directions=True)
    model = training.build_model(mlp(32, w.latent_dim), pm.G, 0, 0)
    cfg = training.TrainConfig(method="equiv", iterations=10000, learning_rate=0.003, seed=0)
    training.train_unsupervised(model, pairs, ds.frames, cfg)
    test = training.mine_pairs(ds, pm, 1e9, ds.rows("test"), both_directions=True)
    ids = {n: g for g, n in enumerate(pm.names, 1)}
    comps = [(ids[a], ids[b]) for a, b in pipeline.composite_names({"patterns": {"composites": None}}, pm.names)]
    rep = evaluation.equiv_report(model.features(ds.frames), test, dict(enumerate(pm.names, 1)), comps, seed=0)
    elapsed = time.perf_counter() - t0
    ok = rep.rho_atomic < 0.05 and rep.rho_composite < 0.10 and elapsed < 120
    verdict(3, ok, f"atomic rho {rep.rho_atomic:.4f} (< 0.05), composite rho {rep.rho_composite:.4f} (< 0.10), "
                   f"{elapsed:.0f}s")


def test_ac4_map_recovery(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed, D in itertools.product(range(5), (2, 4, 8, 16)):
        rng = np.random.default_rng([seed, D])
        M = rng.normal(size=(D, D)) + D * np.eye(D)
        b = rng.normal(size=D)
        zj = rng.normal(size=(2 * D + 1, D))
        fit = evaluation.fit_equiv_map(zj @ M.T + b, zj)
        worst = max(worst, np.linalg.norm(fit.matrix - M) / np.linalg.norm(M))
    elapsed = time.perf_counter() - t0
    verdict(4, worst < 1e-6 and elapsed < 1.0, f"max relative Frobenius error {worst:.2e} (< 1e-6), {elapsed:.3f}s")


# --------------------------------------------------------------------------
# AC5 and AC6 share one set of trained models


AC5_CONFIG = {
    "world": {"kind": "linear", "start_jitter_deg": 30.0, "nuisance_dim": 8, "nuisance_gain": 2.0,
              "nuisance_init": 1.0, "nuisance_step": 0.3, "nuisance_walk": False},
    "network": {"feature_dim": 8, "hidden": 32},
    "train": {"iterations": 3000, "learning_rate": 0.01, "lambda_equiv": 1.0, "lambda_slow": 1.0,
              "temporal_window_s": 0.1, "labels_per_class": 6},
    "eval": {"repetitions": 1, "analogy_queries": 0},
}
AC5_METHODS = ("equiv", "drlim", "clsnet")


@pytest.fixture(scope="module")
def table():
    t0 = time.perf_counter()
    rows = {m: [] for m in AC5_METHODS}
    for seed in range(5):
        cfg = pipeline.validate_config(dict(AC5_CONFIG, seed=seed))
        ds = datasets.quantize(datasets.generate_dataset(cfg["world"], seed)[0])
        pm = pipeline.mine_patterns(cfg, ds)
        for m in AC5_METHODS:
            model = pipeline.train_once(cfg, ds, pm, seed, pipeline.train_config(cfg, method=m)).model
            ev = pipeline.evaluate_model(cfg, ds, model, m, seed, pm)
            rows[m].append((ev["accuracy"][1], ev["equiv"].rho_atomic, ev["equiv"].rho_composite))
    means = {m: np.mean(v, axis=0) for m, v in rows.items()}
    return means, time.perf_counter() - t0


def test_ac5_ordering_trends(verdict, table):
    means, elapsed = table
    acc = {m: means[m][0] for m in AC5_METHODS}
    rho = {m: means[m][1] for m in AC5_METHODS}
    ok = (acc["equiv"] > acc["drlim"] > acc["clsnet"] and rho["equiv"] < rho["drlim"] < rho["clsnet"]
          and elapsed < 480)
    verdict(5, ok, "accuracy " + " > ".join(f"{m} {acc[m]:.1f}" for m in AC5_METHODS)
            + "; atomic rho " + " < ".join(f"{m} {rho[m]:.3f}" for m in AC5_METHODS) + f"; {elapsed:.0f}s")


def test_ac6_atomic_vs_composite(verdict, table):
    means, _ = table
    atomic, composite = means["equiv"][1], means["equiv"][2]
    verdict(6, atomic <= composite, f"EQUIV mean atomic rho {atomic:.3f}, composite rho {composite:.3f} (needs atomic <= composite)")


# --------------------------------------------------------------------------


def test_ac7_slowness_auroc(verdict):
    t0 = time.perf_counter()
    ds, _ = datasets.generate_dataset({"kind": "texture"}, 0)
    T, horizon = 0.25, 2.0
    train = training.slowness_pairs(ds, T, horizon, ds.rows("train"))
    held = training.slowness_pairs(ds, T, horizon, ds.rows("test"))
    net = Network(ds.frame_shape, [Conv(1, 8, 5), MaxPool(3, 2), ReLU(), Conv(8, 8, 5), ReLU(), AvgPool(3, 2),
                                   FullyConnected(32, 16)])
    model = training.build_model(net, 1, ds.num_classes, 0)
    cfg = training.TrainConfig(method="drlim", iterations=2000, learning_rate=0.01, seed=0, temporal_window_s=T)
    training.train(model, training.TrainData(ds.frames, slow_pairs=train), cfg, supervised=False)
    z = model.features(ds.frames)
    auroc = evaluation.slowness_auroc(z[held.left], z[held.right], held.neighbor, "l2").auroc
    elapsed = time.perf_counter() - t0
    verdict(7, auroc > 0.85, f"drlim held-out slowness AUROC {auroc:.3f} (> 0.85), {elapsed:.0f}s")


def _nbv(features):
    cfg = pipeline.validate_config({
        "world": {"kind": "linear", "noise_sigma": 4.0},
        "nbv": {"source": "simulate", "features": features, "k": 25, "start_jitter_deg": 30.0,
                "views": ["up", "down", "right", "left", "up+right"], "n_train_per_class": 100, "n_test": 200},
    })
    return pipeline.run_nbv(cfg)


def test_ac8_next_best_view(verdict):
    oracle, chance = _nbv("oracle"), _nbv("constant")
    gain = oracle.acc_2view - oracle.acc_1view
    ok = (oracle.n_evaluated == 200 and gain >= 5.0
          and chance.acc_1view == 100.0 / 5 and chance.acc_2view == 100.0 / 5)
    verdict(8, ok, f"oracle 1-view {oracle.acc_1view:.1f} -> 2-view {oracle.acc_2view:.1f} (gain {gain:+.1f} >= 5); "
                   f"chance {chance.acc_1view:.1f}/{chance.acc_2view:.1f} (exactly 20.0)")


def _brute_force_distortion(x, K):
    best = np.inf
    for assign in itertools.product(range(K), repeat=len(x)):
        if len(set(assign)) != K:
            continue
        a = np.array(assign)
        best = min(best, sum(((x[a == c] - x[a == c].mean(axis=0)) ** 2).sum() for c in range(K)))
    return best


def test_ac9_kmeans_oracle(verdict):
    rng = np.random.default_rng(2024)
    misses, trials = 0, 100
    for t in range(trials):
        n = int(rng.integers(3, 9))
        K = int(rng.integers(1, 4))
        x = rng.normal(size=(n, 2)) * rng.uniform(0.5, 5.0)
        got = motion.kmeans_points(x, K, seed=t)[2]
        misses += not got <= _brute_force_distortion(x, K) + 1e-9
    verdict(9, misses == 0, f"{trials - misses}/{trials} instances match the exhaustive optimum")


def test_ac10_rho_invariances(verdict):
    rng = np.random.default_rng(10)
    zi, zj = rng.normal(size=(500, 6)), rng.normal(size=(500, 6))
    m = evaluation.fit_equiv_map(zi, zj)
    base = evaluation.rho(zi, zj, m).rho
    drift = 0.0
    for c in (0.1, 10.0):
        mc = evaluation.fit_equiv_map(c * zi, c * zj)
        drift = max(drift, abs(evaluation.rho(c * zi, c * zj, mc).rho - base))
    ident = evaluation.rho(zi, zj, AffineMap.identity(6)).rho
    ok = drift < 1e-10 and abs(ident - 1.0) <= 0.01
    verdict(10, ok, f"scaling drift {drift:.1e} (< 1e-10); identity map rho {ident:.4f} (1 +- 0.01)")


def test_ac11_reproducibility(verdict, tmp_path):
    cfg = {
        "world": {"kind": "linear", "train_episodes_per_class": 2},
        "network": {"feature_dim": 4, "hidden": 16},
        "train": {"method": "equiv_drlim", "iterations": 50, "labels_per_class": 3},
        "eval": {"repetitions": 2, "analogy_queries": 3, "probe_sets": 40},
        "nbv": {"n_test": 40},
        "sweep": {"lr_grid": [0.01, 0.001], "lambda_count": 2, "iterations": 10},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    c = str(tmp_path / "cfg.json")

    def run_all(root):
        ds, pat, tr = str(root / "ds"), str(root / "mine" / "patterns.json"), str(root / "train")
        steps = [
            ["gen-world", "--out", ds],
            ["mine", "--dataset", ds, "--out", str(root / "mine")],
            ["train", "--dataset", ds, "--patterns", pat, "--out", tr],
            ["eval", "--dataset", ds, "--patterns", pat, "--checkpoint", tr, "--out", str(root / "eval")],
            ["nbv", "--dataset", ds, "--checkpoint", tr, "--out", str(root / "nbv")],
            ["sweep", "--dataset", ds, "--patterns", pat, "--out", str(root / "sweep")],
            ["gradcheck", "--out", str(root / "gradcheck")],
        ]
        return [cli.main([s[0], "--config", c] + s[1:]) for s in steps]

    codes = run_all(tmp_path / "a") + run_all(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = set(codes) == {0} and not differ and len(files) > 20
    verdict(11, ok, f"{len(files) - len(differ)}/{len(files)} output files byte-identical across 7 commands"
                    + (f"; differ: {differ[:3]}" if differ else ""))
