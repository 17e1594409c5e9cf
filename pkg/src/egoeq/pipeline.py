"""End-to-end runs driven by one JSON config: data, patterns, training,
evaluation, next-best-view and hyperparameter sweeps.

The command-line tool is a thin layer over these functions.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import datasets, evaluation, motion, nbv, training, worlds
from .engine import AvgPool, Conv, FullyConnected, MaxPool, Network, ReLU, layer_from_dict
from .errors import InputError
from .training import TrainConfig

INVERSE_NAMES = {"up": "down", "down": "up", "right": "left", "left": "right"}

DEFAULT_CONFIG = {
    "seed": 0,
    "world": {"kind": "linear"},
    "patterns": {
        "mode": "declare",
        "K": 6,
        "G": 3,
        "max_gap_s": 1e9,
        "inverses": True,
        "both_directions": True,
        "declare": None,
        "composites": None,
    },
    "network": {"feature_dim": 8, "hidden": 32, "layers": None},
    "train": {"labels_per_class": 6, "slow_horizon_s": 1e9},
    "eval": {
        "repetitions": 5,
        "top_k": [1],
        "auroc_horizon_s": 1e9,
        "analogy_K": 5,
        "analogy_queries": 20,
        "equiv_source": "views",
        "probe_sets": 400,
    },
    "nbv": {
        "k": None,
        "views": None,
        "features": "checkpoint",
        "source": "dataset",
        "n_train_per_class": 100,
        "n_test": 200,
        "start_jitter_deg": 30.0,
    },
    "sweep": {
        "lr_grid": [0.1, 0.01, 0.001, 0.0001],
        "lambda_start_exp": -1.0,
        "lambda_count": 5,
        "iterations": None,
    },
}

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _section(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_train_props = {f.name: {} for f in fields(TrainConfig)}
_train_props.update({
    "method": {"enum": list(training.METHODS)},
    "labels_per_class": {"type": "integer", "minimum": 1},
    "slow_horizon_s": {"type": "number", "exclusiveMinimum": 0},
})

CONFIG_SCHEMA = _section({
    "seed": {"type": "integer", "minimum": 0},
    "world": {"type": "object", "properties": {"kind": {"enum": ["linear", "texture"]}},
              "required": ["kind"]},
    "patterns": _section({
        "mode": {"enum": ["declare", "kmeans"]},
        "K": {"type": "integer", "minimum": 1},
        "G": {"type": "integer", "minimum": 1},
        "max_gap_s": {"type": "number", "exclusiveMinimum": 0},
        "inverses": _bool,
        "both_directions": _bool,
        "declare": {"type": ["object", "null"], "additionalProperties": {"type": "array", "items": _num}},
        "composites": {"type": ["array", "null"], "items": {"type": "array", "items": {"type": "string"},
                                                            "minItems": 2, "maxItems": 2}},
    }),
    "network": _section({
        "feature_dim": {"type": "integer", "minimum": 1},
        "hidden": {"type": "integer", "minimum": 1},
        "layers": {"type": ["array", "null"], "items": {"type": "object"}},
    }),
    "train": _section(_train_props),
    "eval": _section({
        "repetitions": {"type": "integer", "minimum": 1},
        "top_k": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "auroc_horizon_s": {"type": "number", "exclusiveMinimum": 0},
        "analogy_K": {"type": "integer", "minimum": 1},
        "analogy_queries": {"type": "integer", "minimum": 0},
        "equiv_source": {"enum": ["views", "pairs"]},
        "probe_sets": {"type": "integer", "minimum": 2},
    }),
    "nbv": _section({
        "k": {"type": ["integer", "null"], "minimum": 1},
        "views": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "features": {"enum": ["checkpoint", "oracle", "constant"]},
        "source": {"enum": ["dataset", "simulate"]},
        "n_train_per_class": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "start_jitter_deg": {"type": "number", "minimum": 0},
    }),
    "sweep": _section({
        "lr_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "lambda_start_exp": _num,
        "lambda_count": {"type": "integer", "minimum": 1},
        "iterations": {"type": ["integer", "null"], "minimum": 1},
    }),
})


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(cfg):
    """Schema-check ``cfg`` and fill defaults; raises InputError naming the offending path."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config {where}: {exc.message}") from None
    full = _merge(DEFAULT_CONFIG, cfg)
    full["world"] = datasets.world_config(full["world"])
    unknown = set(full["world"]) - set(
        datasets.LINEAR_DEFAULTS if full["world"]["kind"] == "linear" else datasets.TEXTURE_DEFAULTS
    )
    if unknown:
        raise InputError(f"config world: unknown keys {', '.join(sorted(unknown))}")
    train_config(full)
    return full


def load_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} line {exc.lineno}: {exc.msg}") from None
    return validate_config(cfg)


def train_config(cfg, **overrides) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    d = {k: v for k, v in cfg["train"].items() if k in known}
    d.setdefault("seed", cfg["seed"])
    d.update(overrides)
    return TrainConfig.from_dict(d)


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def build_network(cfg, frame_shape) -> Network:
    """Network from ``cfg["network"]``: explicit ``layers`` or the default for the frame shape.

    Vectors get ``FC(n, hidden) - ReLU - FC(hidden, D)``; images get a small
    conv/pool stack followed by ``FC(., D)``.
    """
    ncfg = cfg["network"]
    if ncfg.get("layers"):
        return Network(frame_shape, [layer_from_dict(d) for d in ncfg["layers"]])
    D = ncfg["feature_dim"]
    if len(frame_shape) == 1:
        h = ncfg["hidden"]
        return Network(frame_shape, [FullyConnected(frame_shape[0], h), ReLU(), FullyConnected(h, D)])
    c = frame_shape[0]
    trunk = [Conv(c, 8, 5), MaxPool(3, 2), ReLU(), Conv(8, 8, 5), ReLU(), AvgPool(3, 2)]
    shape = tuple(frame_shape)
    for layer in trunk:
        shape = layer.output_shape(shape)
    return Network(frame_shape, trunk + [FullyConnected(math.prod(shape), D)])


def declared_steps(cfg, ds):
    """Named pose steps for declared patterns (with inverses when configured)."""
    pcfg = cfg["patterns"]
    steps = pcfg.get("declare") or ds.meta.get("atomic_steps")
    if not steps:
        raise InputError("declared patterns need patterns.declare or a dataset with atomic steps")
    out = {}
    for name, step in steps.items():
        out[name] = [float(v) for v in step]
    if pcfg["inverses"]:
        for name, step in list(out.items()):
            inv = INVERSE_NAMES.get(name, f"{name}^-1")
            if inv not in out:
                out[inv] = [-v for v in step]
    return out


def mine_patterns(cfg, ds) -> motion.MotionPatternModel:
    """Declared steps, or k-means over train-split pose deltas keeping the G largest."""
    pcfg = cfg["patterns"]
    if pcfg["mode"] == "declare":
        return motion.declare_patterns(declared_steps(cfg, ds))
    rows = ds.rows("train")
    a, b = motion.pair_indices(ds.times[rows], pcfg["max_gap_s"])
    a, b = rows[a], rows[b]
    same = ds.episodes[a] == ds.episodes[b]
    deltas = ds.poses[b[same]] - ds.poses[a[same]]
    if len(deltas) < pcfg["K"]:
        raise InputError(f"{len(deltas)} pose deltas cannot form {pcfg['K']} clusters")
    model = motion.kmeans(deltas, pcfg["K"], cfg["seed"])
    return motion.retain_largest(model, pcfg["G"])


def pattern_pairs(cfg, ds, pm, split):
    return training.mine_pairs(ds, pm, cfg["patterns"]["max_gap_s"], ds.rows(split),
                               both_directions=cfg["patterns"]["both_directions"])


def _inverse(name):
    if name.endswith("^-1"):
        return name[:-3]
    return INVERSE_NAMES.get(name, f"{name}^-1")


def composite_names(cfg, atomic):
    """Configured composites, or every pair of listed atomic motions that are not mutual inverses."""
    comps = cfg["patterns"]["composites"]
    if comps is not None:
        return [tuple(c) for c in comps]
    atomic = list(atomic)
    return [(a, b) for i, a in enumerate(atomic) for b in atomic[i + 1:] if _inverse(a) != b]


def composite_ids(cfg, pm):
    ids = {name: g for g, name in enumerate(pm.names, 1)}
    return [(ids[a], ids[b]) for a, b in composite_names(cfg, pm.names) if a in ids and b in ids]


def _split_rows(ds, split, holdout):
    """Rows of ``split``; with ``holdout`` the last episode of each class is set aside."""
    rows = ds.rows(split)
    if not holdout:
        return rows, np.zeros(0, dtype=np.int64)
    last = {}
    for e in np.unique(ds.episodes[rows]).tolist():
        c = int(ds.labels[rows][ds.episodes[rows] == e][0])
        last[c] = max(last.get(c, -1), e)
    val_eps = sorted(last.values())
    mask = np.isin(ds.episodes[rows], val_eps)
    if mask.all():
        raise InputError("validation hold-out needs at least two train episodes per class")
    return rows[~mask], rows[mask]


def prepare_data(cfg, ds, pm, tcfg: TrainConfig, seed, rows=None) -> training.TrainData:
    """Labelled sample and unlabelled pairs for one training run (train split by default)."""
    rows = ds.rows("train") if rows is None else rows
    lab_rows, labels = training.sample_labeled(ds, cfg["train"]["labels_per_class"], seed, rows)
    data = training.TrainData(ds.frames, lab_rows, labels)
    if tcfg.uses_equiv:
        data.pairs = training.mine_pairs(ds, pm, cfg["patterns"]["max_gap_s"], rows,
                                         both_directions=cfg["patterns"]["both_directions"])
    if tcfg.slowness_variant:
        data.slow_pairs = training.slowness_pairs(ds, tcfg.temporal_window_s, cfg["train"]["slow_horizon_s"], rows)
    return data


def train_once(cfg, ds, pm, seed, tcfg=None, rows=None):
    """Build, initialise and train one model; returns the TrainResult."""
    tcfg = tcfg or train_config(cfg, seed=seed)
    net = build_network(cfg, ds.frame_shape)
    model = training.build_model(net, pm.G if pm is not None else 1, ds.num_classes, seed,
                                 tcfg.map_init_noise, pm)
    data = prepare_data(cfg, ds, pm, tcfg, seed, rows)
    return training.train_joint(model, data, tcfg)


def repetition_seed(cfg, r):
    return cfg["seed"] + 1000 * r


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def learned_map(model):
    def get(g):
        return evaluation.AffineMap(model.maps.matrices[g - 1], model.maps.biases[g - 1])
    return get


def world_of(ds):
    """Rebuild the world a generated dataset came from."""
    if "world" not in ds.meta or "seed" not in ds.meta:
        raise InputError("dataset manifest does not record its world; use eval.equiv_source=pairs")
    return datasets.make_world(ds.meta["world"], ds.meta["seed"])


def world_motions(world):
    """Named atomic pose steps of a world, inverses included."""
    if isinstance(world, worlds.LatentLinearWorld):
        names = []
        for m in world.atomic_motions:
            names += [m, _inverse(m)]
        return {n: world.pose_step(n).tolist() for n in names}
    return {n: list(world.step(n)) for n in ("left", "right", "zoom")}


def probe_features(cfg, ds, world, model, views, seed):
    """Features ``(n, 1 + V, D)`` of freshly rendered view sets, quantized like the dataset."""
    n = cfg["eval"]["probe_sets"]
    if isinstance(world, worlds.LatentLinearWorld):
        wc = datasets.world_config(ds.meta["world"])
        # starts cover the elevation/azimuth grid the episodes scan
        span = ((wc["grid_rows"] - 1) * wc["up_deg"], (wc["grid_cols"] - 1) * wc["right_deg"])
        frames, _ = worlds.sample_view_sets(world, n, views, [seed, 5], wc["start_jitter_deg"], span_deg=span)
    else:
        frames, _ = worlds.texture_view_sets(world, n, views, [seed, 5])
    if ds.meta.get("pixel_scale"):
        frames = datasets.quantize_frames(frames, ds.meta["pixel_offset"], ds.meta["pixel_scale"])
    V = len(views) + 1
    return model.features(frames.reshape((n * V,) + tuple(ds.frame_shape))).reshape(n, V, -1)


def probe_report(cfg, ds, model, pm, seed, learned):
    """Equivariance on rendered view sets: atomic world motions and their composites."""
    world = world_of(ds)
    steps = world_motions(world)
    atomic = list(steps)
    views = atomic + ["+".join(c) for c in composite_names(cfg, atomic)]
    z = probe_features(cfg, ds, world, model, views, seed)
    maps = {}
    if learned and pm is not None:
        get = learned_map(model)
        for name, step in steps.items():
            g = motion.assign_pattern(pm, step)
            maps[name] = get(g) if g else None
    return evaluation.view_set_report(z[:, 0], z[:, 1:], views, seed, maps)


def evaluate_model(cfg, ds, model, method, seed, pm=None):
    """Equivariance, recognition, slowness-ROC and analogy results for one model.

    ``pm`` defaults to the model's own patterns; models trained without
    patterns are measured against ``mine_patterns(cfg, ds)``.
    """
    ecfg = cfg["eval"]
    test = ds.rows("test")
    z = model.features(ds.frames)
    out = {}
    pm = pm or model.patterns or mine_patterns(cfg, ds)
    learned = method in ("equiv", "equiv_drlim") and model.patterns is not None
    tp = pattern_pairs(cfg, ds, pm, "test")
    if ecfg["equiv_source"] == "views":
        out["equiv"] = probe_report(cfg, ds, model, pm, seed, learned)
    elif len(tp):
        out["equiv"] = evaluation.equiv_report(
            z, tp, dict(enumerate(pm.names, 1)), composite_ids(cfg, pm), seed,
            learned_map(model) if learned else None,
        )
    if len(tp):
        out["analogy"] = analogies(z, ds, tp, ecfg["analogy_K"], ecfg["analogy_queries"], seed)
    if model.head is not None:
        logits = model.head.logits(z[test])
        out["accuracy"] = {k: evaluation.recognition_accuracy(logits, ds.labels[test], k) for k in ecfg["top_k"]}
    T = cfg["train"].get("temporal_window_s", TrainConfig.temporal_window_s)
    sp = training.slowness_pairs(ds, T, ecfg["auroc_horizon_s"], test)
    distance = "l1" if method == "temporal" else "l2"
    out["roc"] = evaluation.slowness_auroc(z[sp.left], z[sp.right], sp.neighbor, distance)
    return out


def analogies(z, ds, pairs, K, n_queries, seed):
    """Feature- and pixel-difference neighbours for a seeded sample of query pairs."""
    if not n_queries or len(pairs) < 2:
        return {"queries": [], "top1_pattern_match": None}
    rng = np.random.default_rng([seed, 7])
    picks = np.sort(rng.choice(len(pairs), size=min(n_queries, len(pairs)), replace=False))
    index = {(int(a), int(b)): int(g) for a, b, g in zip(pairs.left, pairs.right, pairs.pattern)}
    results, hits = [], []
    for q in picks.tolist():
        res = evaluation.analogy_nn(z, ds.frames, (pairs.left, pairs.right), (pairs.left[q], pairs.right[q]), K)
        results.append(res)
        hits.append(index[res.feature_neighbors[0]] == int(pairs.pattern[q]))
    return {"queries": results, "top1_pattern_match": float(np.mean(hits))}


def summarize(evals):
    """Mean over repetitions of every report quantity, with accuracy standard errors."""
    def mean_of(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    summary = {"repetitions": len(evals)}
    summary["rho_atomic"] = mean_of([e["equiv"].rho_atomic for e in evals if "equiv" in e])
    summary["rho_composite"] = mean_of([e["equiv"].rho_composite for e in evals if "equiv" in e])
    summary["auroc"] = mean_of([e["roc"].auroc for e in evals])
    summary["analogy_top1_pattern_match"] = mean_of(
        [e["analogy"]["top1_pattern_match"] for e in evals if "analogy" in e])
    accs = [e["accuracy"] for e in evals if "accuracy" in e]
    if accs:
        per_k = {}
        for k in accs[0]:
            m, se = evaluation.mean_stderr([a[k] for a in accs])
            per_k[str(k)] = {"mean": m, "stderr": se, "values": [a[k] for a in accs]}
        first = str(next(iter(accs[0])))
        summary["accuracy_mean"] = per_k[first]["mean"]
        summary["accuracy_stderr"] = per_k[first]["stderr"]
        summary["accuracy_top_k"] = per_k
    else:
        summary["accuracy_mean"] = summary["accuracy_stderr"] = None
    return summary


# --------------------------------------------------------------------------
# Next-best view
# --------------------------------------------------------------------------


def _feature_fn(cfg, world, model):
    kind = cfg["nbv"]["features"]
    if kind == "checkpoint":
        if model is None:
            raise InputError("nbv features=checkpoint needs --checkpoint")
        return model.features
    if kind == "oracle":
        if not isinstance(world, worlds.LatentLinearWorld):
            raise InputError("oracle features exist only for the linear world")
        return lambda x: world.oracle_features(np.asarray(x).reshape(len(x), -1))
    return lambda x: np.zeros((len(x), 1))


def nbv_views(cfg, ds_or_world):
    views = cfg["nbv"]["views"]
    if views:
        return list(views)
    if isinstance(ds_or_world, worlds.LatentLinearWorld):
        base = ds_or_world.atomic_motions
    else:
        base = list(ds_or_world.meta.get("atomic_steps", {}))
    if not base:
        raise InputError("nbv.views must be set for worlds without declared atomic steps")
    out = []
    for name in base:
        out += [name, INVERSE_NAMES.get(name, f"{name}^-1")]
    return out + ["+".join(base[:2])] if len(base) >= 2 else out


def _candidates(names, z0, zv, labels, k, C):
    cands = []
    for v, name in enumerate(names):
        m = evaluation.fit_equiv_map(zv[:, v], z0) if len(z0) > z0.shape[1] else evaluation.AffineMap.identity(z0.shape[1])
        clf = nbv.build_pair_classifier(name, z0, zv[:, v], labels, k, C)
        cands.append(nbv.CandidateView(name, m, clf))
    return cands


def run_nbv(cfg, ds=None, world=None, model=None) -> nbv.NbvReport:
    """Next-best-view evaluation on dataset views or freshly simulated view sets."""
    ncfg = cfg["nbv"]
    if ncfg["source"] == "simulate":
        if world is None:
            world = datasets.make_world(cfg["world"], cfg["seed"])
        if not isinstance(world, worlds.LatentLinearWorld):
            raise InputError("simulated NBV needs the linear world")
        names = nbv_views(cfg, world)
        C = len(world.prototypes)
        feat = _feature_fn(cfg, world, model)
        trf, trl = worlds.sample_view_sets(world, ncfg["n_train_per_class"] * C, names,
                                           [cfg["seed"], 1], ncfg["start_jitter_deg"])
        tef, tel = worlds.sample_view_sets(world, ncfg["n_test"], names, [cfg["seed"], 2], ncfg["start_jitter_deg"])
        V = len(names) + 1
        ztr = feat(trf.reshape(-1, *trf.shape[2:])).reshape(len(trf), V, -1)
        zte = feat(tef.reshape(-1, *tef.shape[2:])).reshape(len(tef) * V, -1)
        k, flagged = nbv.choose_k(trl, ncfg["k"])
        cands = _candidates(names, ztr[:, 0], ztr[:, 1:], trl, k, C)
        samples = [nbv.NbvSample(i * V, int(tel[i]), {n: i * V + v for v, n in enumerate(names, 1)})
                   for i in range(len(tel))]
        return nbv.evaluate_nbv(zte, samples, cands, ztr[:, 0], trl, k, C, flagged)
    if ds is None:
        raise InputError("dataset NBV needs --dataset")
    if world is None and ncfg["features"] == "oracle":
        world = datasets.make_world(ds.meta["world"], ds.meta["seed"])
    names = nbv_views(cfg, ds)
    steps = _view_steps(cfg, ds, names)
    z = _feature_fn(cfg, world, model)(ds.frames)
    C = ds.num_classes
    train, test = ds.rows("train"), ds.rows("test")
    tr_views = nbv.view_rows(ds.poses, ds.episodes, train, steps)
    # bank rows: train frames with every candidate view present
    full = [i for i, v in enumerate(tr_views) if all(v[n] is not None for n in names)]
    if not full:
        raise InputError("no training frame has all candidate views")
    r0 = train[full]
    zv = np.stack([z[[tr_views[i][n] for i in full]] for n in names], axis=1)
    k, flagged = nbv.choose_k(ds.labels[r0], ncfg["k"])
    cands = _candidates(names, z[r0], zv, ds.labels[r0], k, C)
    te_views = nbv.view_rows(ds.poses, ds.episodes, test, steps)
    samples = [nbv.NbvSample(int(r), int(ds.labels[r]), v) for r, v in zip(test, te_views)]
    samples = samples[: ncfg["n_test"]]
    return nbv.evaluate_nbv(z, samples, cands, z[r0], ds.labels[r0], k, C, flagged)


def _view_steps(cfg, ds, names):
    base = declared_steps({"patterns": dict(cfg["patterns"], inverses=True)}, ds)
    steps = {}
    for name in names:
        parts = name.split("+")
        if any(p not in base for p in parts):
            raise InputError(f"unknown view {name!r}")
        steps[name] = np.sum([base[p] for p in parts], axis=0)
    return steps


# --------------------------------------------------------------------------
# Sweep
# --------------------------------------------------------------------------


def lambda_grid(start_exp, count):
    """Log grid in steps of 10^0.5 starting at 10^start_exp."""
    return [float(10.0 ** (start_exp + 0.5 * i)) for i in range(count)]


def run_sweep(cfg, ds, pm):
    """Greedy selection: learning rate for the softmax-only net, then lambda at that rate.

    Models train on the train split minus the last episode of each class and
    are scored on that held-out episode. Returns the table rows and the
    chosen ``(lr, lambda)``.
    """
    scfg = cfg["sweep"]
    fit_rows, val_rows = _split_rows(ds, "train", holdout=True)
    overrides = {"iterations": scfg["iterations"]} if scfg["iterations"] else {}
    method = cfg["train"].get("method", TrainConfig.method)
    lam_key = "lambda_equiv" if method in ("equiv", "equiv_drlim") else "lambda_slow"
    rows = []

    def score(m, lr, lam):
        over = dict(overrides, method=m, learning_rate=lr)
        if lam is not None:
            over[lam_key] = lam
        tcfg = train_config(cfg, **over)
        model = train_once(cfg, ds, pm, cfg["seed"], tcfg, fit_rows).model
        logits = model.head.logits(model.features(ds.frames[val_rows]))
        return evaluation.recognition_accuracy(logits, ds.labels[val_rows], 1)

    best_lr, best_acc = None, -1.0
    for lr in scfg["lr_grid"]:
        acc = score("clsnet", lr, None)
        rows.append({"stage": "lr", "method": "clsnet", "lr": lr, "lambda": 0.0, "val_accuracy": acc})
        if acc > best_acc:
            best_lr, best_acc = lr, acc
    best_lam = None
    if method != "clsnet":
        best_acc = -1.0
        for lam in lambda_grid(scfg["lambda_start_exp"], scfg["lambda_count"]):
            acc = score(method, best_lr, lam)
            rows.append({"stage": "lambda", "method": method, "lr": best_lr, "lambda": lam, "val_accuracy": acc})
            if acc > best_acc:
                best_lam, best_acc = lam, acc
    return rows, {"method": method, "learning_rate": best_lr, lam_key: best_lam, "val_accuracy": best_acc}
