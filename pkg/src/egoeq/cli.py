"""``egoeq`` command line: gen-world, mine, train, eval, nbv, sweep, gradcheck.

Everything that affects results lives in the JSON config; flags only pick
files. Reports are written with sorted keys and ``repr`` floats so reruns are
byte-identical. Errors print one ``egoeq-error: <kind>: <message>`` line to
stderr and exit 1 (input/config) or 2 (numeric failure).
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads():
    # must run before numpy is first imported
    n = os.environ.get("EGOEQ_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage problems are input errors: exit 1 with the machine-readable prefix
        self.exit(1, f"egoeq-error: usage: {message}\n")


def _parser():
    p = _Parser(prog="egoeq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, dataset=False, checkpoint=False, patterns=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        sp.add_argument("--out", required=True, help="output directory")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (generated from the config when omitted)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model manifest, or a directory of model_r*.json")
        if patterns:
            sp.add_argument("--patterns", help="patterns.json written by `mine`")
        return sp

    add("gen-world", "render a synthetic dataset")
    add("mine", "discover or declare motion patterns", dataset=True)
    add("train", "train one model per repetition", dataset=True, patterns=True)
    add("eval", "equivariance, recognition, ROC and analogy reports", dataset=True, checkpoint=True,
        patterns=True)
    add("nbv", "next-best-view evaluation", dataset=True, checkpoint=True)
    add("sweep", "greedy learning-rate then lambda search", dataset=True, patterns=True)
    add("gradcheck", "finite-difference check of every layer and loss")
    return p


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _jsonable(obj):
    import math

    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj):
    import json

    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def _cell(v):
    if hasattr(v, "item"):
        v = v.item()
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _config(args):
    from . import pipeline

    return pipeline.load_config(args.config) if args.config else pipeline.validate_config({})


def _dataset(args, cfg):
    from . import datasets

    if getattr(args, "dataset", None):
        return datasets.read_dataset(args.dataset)
    ds, _ = datasets.generate_dataset(cfg["world"], cfg["seed"])
    # match what a written-then-read dataset holds
    return datasets.quantize(ds)


def _patterns(args, cfg, ds):
    import json
    from pathlib import Path

    from . import motion, pipeline
    from .errors import InputError

    path = getattr(args, "patterns", None)
    if not path:
        return pipeline.mine_patterns(cfg, ds)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return motion.MotionPatternModel.from_dict(doc["model"])
    except FileNotFoundError:
        raise InputError(f"patterns file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a patterns file ({exc})") from None


def cmd_gen_world(args, out):
    from . import datasets

    cfg = _config(args)
    ds, _ = datasets.generate_dataset(cfg["world"], cfg["seed"])
    datasets.write_dataset(out, ds)


def cmd_mine(args, out):
    import numpy as np

    from . import pipeline

    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm = pipeline.mine_patterns(cfg, ds)
    pairs = pipeline.pattern_pairs(cfg, ds, pm, "train")
    counts = np.bincount(pairs.pattern, minlength=pm.G + 1)[1:]
    names = pm.names or [f"pattern{g}" for g in range(1, pm.G + 1)]
    write_json(out / "patterns.json", {
        "mode": cfg["patterns"]["mode"],
        "model": pm.to_dict(),
        "patterns": [
            {"id": g, "name": names[g - 1], "centroid": pm.centroids_raw[pm.retained[g - 1]],
             "train_pairs": counts[g - 1]}
            for g in range(1, pm.G + 1)
        ],
    })


def cmd_train(args, out):
    from . import pipeline, training
    from .errors import DivergenceError

    cfg = _config(args)
    ds = _dataset(args, cfg)
    method = cfg["train"].get("method", training.TrainConfig.method)
    needs_pairs = method != "clsnet"
    pm = _patterns(args, cfg, ds) if needs_pairs or args.patterns else None
    runs = []
    for r in range(cfg["eval"]["repetitions"]):
        seed = pipeline.repetition_seed(cfg, r)
        try:
            res = pipeline.train_once(cfg, ds, pm, seed)
        except DivergenceError as exc:
            (out / f"loss_r{r}.csv").write_text(
                training.TrainResult(None, exc.trace, None).trace_csv(), encoding="utf-8")
            raise
        training.save_model(out / f"model_r{r}.json", res.model, {"method": method, "repetition": r})
        (out / f"loss_r{r}.csv").write_text(res.trace_csv(), encoding="utf-8")
        last = res.trace[-1] if res.trace else None
        runs.append({"repetition": r, "seed": seed, "final": dict(zip(training.TRACE_COLUMNS, last)) if last else None})
    write_json(out / "train_summary.json", {"method": method, "config": cfg, "runs": runs})


def _checkpoints(path):
    from pathlib import Path

    from .errors import InputError

    if not path:
        raise InputError("this command needs --checkpoint")
    p = Path(path)
    if p.is_dir():
        found = sorted(p.glob("model_r*.json"), key=lambda q: int(q.stem[len("model_r"):]))
        if not found:
            raise InputError(f"no model_r*.json checkpoints in {p}")
        return found
    if not p.exists():
        raise InputError(f"checkpoint not found: {p}")
    return [p]


def cmd_eval(args, out):
    from . import pipeline, training

    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm = _patterns(args, cfg, ds) if args.patterns else None
    evals, equiv_rows, acc_rows, roc_rows, analogy_rows = [], [], [], [], []
    for r, path in enumerate(_checkpoints(args.checkpoint)):
        model, doc = training.load_model(path)
        method = (doc.get("extra") or {}).get("method", cfg["train"].get("method", training.TrainConfig.method))
        ev = pipeline.evaluate_model(cfg, ds, model, method, pipeline.repetition_seed(cfg, r), pm)
        evals.append(ev)
        if "equiv" in ev:
            for m in ev["equiv"].motions:
                equiv_rows.append([r, m.name, m.kind, m.rho, m.rho_direct, m.rho_learned,
                                   m.n_fit, m.n_measure, m.n_skipped, int(m.ridge), m.note])
        for k, acc in ev.get("accuracy", {}).items():
            acc_rows.append([r, k, acc])
        roc = ev["roc"]
        for t, tp, fp in zip(roc.thresholds, roc.tpr, roc.fpr):
            roc_rows.append([r, t, tp, fp])
        if "analogy" in ev:
            for q, res in enumerate(ev["analogy"]["queries"]):
                qi, qj = (int(ds.frame_ids[v]) for v in res.query)
                for rank, ((a, b), d) in enumerate(zip(res.feature_neighbors, res.feature_distances), 1):
                    analogy_rows.append([r, q, qi, qj, "feature", rank, int(ds.frame_ids[a]), int(ds.frame_ids[b]), d])
                for rank, ((a, b), d) in enumerate(zip(res.pixel_neighbors, res.pixel_distances), 1):
                    analogy_rows.append([r, q, qi, qj, "pixel", rank, int(ds.frame_ids[a]), int(ds.frame_ids[b]), d])
    summary = pipeline.summarize(evals)
    summary["roc"] = [{"repetition": r, "auroc": e["roc"].auroc, "n_pos": e["roc"].n_pos, "n_neg": e["roc"].n_neg}
                      for r, e in enumerate(evals)]
    summary["equiv"] = [e["equiv"].to_dict() for e in evals if "equiv" in e]
    write_json(out / "summary.json", summary)
    write_csv(out / "equiv.csv", ["repetition", "motion", "kind", "rho", "rho_direct", "rho_learned",
                                  "n_fit", "n_measure", "n_skipped", "ridge", "note"], equiv_rows)
    write_csv(out / "accuracy.csv", ["repetition", "top_k", "accuracy"], acc_rows)
    write_csv(out / "roc.csv", ["repetition", "threshold", "tpr", "fpr"], roc_rows)
    write_csv(out / "analogy.csv", ["repetition", "query", "query_frame_i", "query_frame_j", "space", "rank",
                                    "frame_i", "frame_j", "distance"], analogy_rows)


def cmd_nbv(args, out):
    from . import pipeline, training

    cfg = _config(args)
    model = None
    if cfg["nbv"]["features"] == "checkpoint":
        model, _ = training.load_model(_checkpoints(args.checkpoint)[0])
    ds = None
    if cfg["nbv"]["source"] == "dataset":
        ds = _dataset(args, cfg)
    report = pipeline.run_nbv(cfg, ds=ds, model=model)
    write_json(out / "nbv.json", report.to_dict())


def cmd_sweep(args, out):
    from . import pipeline

    cfg = _config(args)
    ds = _dataset(args, cfg)
    method = cfg["train"].get("method", "clsnet")
    pm = _patterns(args, cfg, ds) if method != "clsnet" else None
    rows, best = pipeline.run_sweep(cfg, ds, pm)
    write_csv(out / "sweep.csv", ["stage", "method", "lr", "lambda", "val_accuracy"],
              [[r["stage"], r["method"], r["lr"], r["lambda"], r["val_accuracy"]] for r in rows])
    write_json(out / "sweep.json", {"best": best, "rows": rows})


def cmd_gradcheck(args, out):
    from . import gradcheck
    from .errors import DivergenceError

    cfg = _config(args)
    results = gradcheck.run_all(cfg["seed"])
    worst = max(results, key=results.get)
    write_json(out / "gradcheck.json", {"tolerance": gradcheck.TOLERANCE, "max_relative_error": results,
                                        "passed": results[worst] < gradcheck.TOLERANCE})
    if results[worst] >= gradcheck.TOLERANCE:
        raise DivergenceError(f"gradient check {worst} has relative error {results[worst]:.3e}")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "mine": cmd_mine,
    "train": cmd_train,
    "eval": cmd_eval,
    "nbv": cmd_nbv,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind, message, code):
    print(f"egoeq-error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None):
    _cap_threads()
    args = _parser().parse_args(argv)
    from pathlib import Path

    from .errors import DivergenceError, EgoEqError, InputError

    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except InputError as exc:
        return _fail("input", exc, 1)
    except DivergenceError as exc:
        return _fail("divergence", exc, 2)
    except EgoEqError as exc:
        return _fail("internal", exc, 2)
    except OSError as exc:
        return _fail("input", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
