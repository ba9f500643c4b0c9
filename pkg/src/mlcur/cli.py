"""Command-line interface: generate | train | eval | ablation | trace-export."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

import numpy as np

from . import io as mio
from .baselines import knn_predict, train_em
from .evaluation import (
    AblationSpec,
    VARIANTS,
    curriculum_trace_export,
    evaluate_model,
    results_table,
    run_experiment,
    trace_csv,
)
from .promp import BasisConfig, Trajectory
from .reacher import MODES, ReacherWorld, generate_reacher_dataset
from .trainer import TrainConfig, TrainTrace, train_ml_cur

log = logging.getLogger("mlcur")

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class CLIError(Exception):
    pass


def load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        cfg = tomllib.loads(raw.decode("utf-8"))
    else:
        cfg = json.loads(raw)
    if not isinstance(cfg, dict):
        raise CLIError(f"{path}: config must be a key-value table")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_mix(s):
    if isinstance(s, (list, tuple)):
        return tuple(float(x) for x in s)
    parts = tuple(float(x) for x in str(s).split(","))
    if len(parts) != 3:
        raise CLIError("--mix needs three comma-separated proportions")
    return parts


def _world(args, fallback=None):
    if getattr(args, "world", None):
        return ReacherWorld.from_dict(args.world)
    return fallback or ReacherWorld()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    world = _world(args)
    mix = _parse_mix(args.mix)
    demos = generate_reacher_dataset(world, args.n, mix, args.seed)
    basis = BasisConfig(args.n_basis, ridge=args.ridge)
    C = np.array([d.context for d in demos])
    modes = [d.mode for d in demos]
    ds = mio.Dataset(C, trajectories=[Trajectory(d.joints) for d in demos], modes=modes,
                     basis=basis, world=world)
    if not args.raw:
        ds = mio.Dataset(C, omegas=ds.encoded(basis)[1], modes=modes, basis=basis, world=world)
    mio.write_dataset(args.out, ds)
    counts = Counter(modes)
    print(f"wrote {len(ds)} collision-free demonstrations to {args.out}")
    print("mode counts: " + ", ".join(f"{m}={counts.get(m, 0)}" for m in MODES))
    return 0


def _train_config(args):
    return TrainConfig(
        n_components=args.K,
        n_eff=args.n_eff,
        alpha=args.alpha,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        seed=args.seed,
        ablation=args.ablation,
    )


def cmd_train(args):
    ds = mio.read_dataset(args.data)
    C, W = ds.encoded()
    basis = ds.basis or BasisConfig()
    meta = {"basis": basis, "world": ds.world}
    trace_path = args.trace or f"{os.path.splitext(args.out)[0]}.trace.csv"
    if args.algo == "knn":
        k = args.K
        if not 1 <= k <= len(ds):
            raise CLIError(f"k must lie in [1, {len(ds)}]")
        ref = {"k": k, "dataset": os.path.abspath(args.data), "dataset_sha256": mio.file_sha256(args.data)}
        mio.write_model(args.out, ref, "knn", config={"k": k}, **meta)
        print(f"stored knn reference (k={k}) to {args.data} in {args.out}")
        return 0
    if args.algo == "em":
        res = train_em(C, W, args.K, max_iters=args.max_iters, seed=args.seed)
        cfg = {"K": args.K, "seed": args.seed, "max_iters": args.max_iters}
        mio.write_model(args.out, res.model, "em-moe", config=cfg, **meta,
                        extra={"log_likelihoods": res.log_likelihoods.tolist()})
        rows = "\n".join(f"{i},{v!r}" for i, v in enumerate(res.log_likelihoods))
        _write_text(trace_path, "iteration,log_likelihood\n" + rows + "\n")
        print(f"em: {len(res.log_likelihoods)} iterations, final log-likelihood {res.log_likelihoods[-1]:.6f}")
        return 0
    config = _train_config(args)
    res = train_ml_cur(C, W, config)
    mio.write_model(args.out, res.model, "ml-cur", config=config.to_dict(), **meta,
                    extra={"trace": res.trace.to_dict()})
    _write_text(trace_path, trace_csv(curriculum_trace_export(res.trace)))
    last = res.trace[-1]
    print(f"ml-cur: {len(res.trace)} iterations, converged={res.trace.converged}, "
          f"final objective {last.objective:.6f}")
    print("effective samples per component: " + ", ".join(f"{v:.2f}" for v in last.effective_samples))
    return 0


def _load_policy(model, doc):
    if doc["kind"] != "knn":
        return model
    path = model["dataset"]
    if not os.path.exists(path):
        raise CLIError(f"knn model refers to missing dataset {path}")
    if mio.file_sha256(path) != model["dataset_sha256"]:
        raise CLIError(f"dataset {path} changed since the knn model was stored")
    C, W = mio.read_dataset(path).encoded()
    k = model["k"]
    return lambda Q: knn_predict(C, W, Q, k)


def cmd_eval(args):
    model, doc = mio.read_model(args.model)
    basis = BasisConfig.from_dict(doc["basis"]) if doc.get("basis") else BasisConfig()
    world = ReacherWorld.from_dict(doc["world"]) if doc.get("world") else None
    test_W = None
    if args.data:
        ds = mio.read_dataset(args.data)
        if ds.basis is not None and not ds.is_raw and ds.basis != basis:
            raise CLIError("test dataset and model use different bases")
        C, W = ds.encoded(basis)
        test_W = W
        world = world or ds.world
    else:
        world = _world(args, world)
        C = world.sample_targets(args.n_test, np.random.default_rng([args.seed, 2]))
    world = _world(args, world)
    policy = _load_policy(model, doc)
    rep = evaluate_model(policy, world, C, basis, args.rollout, args.seed,
                         args.success_radius, test_omegas=None if doc["kind"] == "knn" else test_W)
    out = _finite([rep.to_dict()])[0]
    out.update(schema_version=mio.SCHEMA_VERSION, model=os.path.basename(args.model), kind=doc["kind"],
               success_metric="collision-free reach rate")
    mio.write_json(args.out, out)
    csv_path = f"{os.path.splitext(args.out)[0]}.csv"
    keys = ["collision_rate", "mean_distance_error", "success_rate", "n_contexts", "test_log_likelihood"]
    _write_text(csv_path, ",".join(keys) + "\n" + ",".join(repr(out[k]) for k in keys) + "\n")
    print(f"{doc['kind']}: collision rate {rep.collision_rate:.3f}, "
          f"mean distance error {rep.mean_distance_error:.4f}, "
          f"collision-free reach rate {rep.success_rate:.3f} over {rep.n_contexts} contexts")
    return 0


def cmd_ablation(args):
    cfg = load_config(args.spec)
    spec = AblationSpec(**cfg)
    rows, summary = run_experiment(spec)
    _write_text(args.out, results_table(rows, summary))
    json_path = f"{os.path.splitext(args.out)[0]}.json"
    mio.write_json(json_path, {"schema_version": mio.SCHEMA_VERSION, "spec": spec.to_dict(),
                               "rows": _finite(rows), "summary": _finite(summary)})
    for a in summary:
        print(f"{a['variant']:>20}: collision {a['collision_rate_mean']:.3f}±{a['collision_rate_std']:.3f}  "
              f"MDE {a['mean_distance_error_mean']:.4f}±{a['mean_distance_error_std']:.4f}  "
              f"reach {a['success_rate_mean']:.3f}±{a['success_rate_std']:.3f}  ({a['n_failed']} failed)")
    return 0


def _finite(rows):
    def fix(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v
    return [{k: fix(v) for k, v in r.items()} for r in rows]


def cmd_trace_export(args):
    doc = mio.read_json(args.model)
    mio.check_version(doc, args.model)
    if "trace" not in doc:
        raise CLIError(f"{args.model} carries no curriculum trace (only ml-cur models do)")
    trace = TrainTrace.from_dict(doc["trace"])
    _write_text(args.out, trace_csv(curriculum_trace_export(trace)))
    print(f"wrote {len(trace)} iterations to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=False)
    common.add_argument("--config", help="TOML or JSON file with default flag values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mlcur", description="Curriculum mixture-of-experts imitation on a planar reacher")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize reacher demonstrations")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--mix", default="0.45,0.45,0.10")
    g.add_argument("--n-basis", type=int, default=10)
    g.add_argument("--ridge", type=float, default=1e-6)
    g.add_argument("--raw", action="store_true", help="store joint trajectories instead of weights")
    g.set_defaults(func=cmd_generate, world=None)

    t = sub.add_parser("train", parents=[common], help="fit a policy to a dataset")
    t.add_argument("--data", required=False)
    t.add_argument("--algo", choices=("ml-cur", "em", "knn"), default="ml-cur")
    t.add_argument("-K", type=int, default=2, help="components (neighbours for knn)")
    t.add_argument("--n-eff", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--ablation", choices=("none",) + VARIANTS[1:], default="none")
    t.add_argument("--max-iters", type=int, default=500)
    t.add_argument("--rel-tol", type=float, default=1e-6)
    t.add_argument("--trace", help="trace CSV path (default: next to the model)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="roll out a model and score it")
    e.add_argument("--model", required=False)
    e.add_argument("--data", help="dataset with test contexts")
    e.add_argument("--n-test", type=int, default=200, help="contexts to sample when no dataset is given")
    e.add_argument("--rollout", choices=("argmax", "sample"), default="argmax")
    e.add_argument("--success-radius", type=float, default=0.5)
    e.set_defaults(func=cmd_eval, world=None)

    a = sub.add_parser("ablation", parents=[common], help="run an ablation batch from a spec file")
    a.add_argument("--spec", required=False)
    a.set_defaults(func=cmd_ablation)

    x = sub.add_parser("trace-export", parents=[common], help="curriculum trace of an ml-cur model as CSV")
    x.add_argument("--model", required=False)
    x.set_defaults(func=cmd_trace_export)
    return p, sub


REQUIRED = {
    "generate": ("out",),
    "train": ("data", "out"),
    "eval": ("model", "out"),
    "ablation": ("spec", "out"),
    "trace-export": ("model", "out"),
}


def parse_args(argv):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    if cfg:
        # config values act as defaults; explicit flags win
        sp = sub.choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known - {"world"}
        if unknown:
            raise CLIError(f"unknown config keys: {sorted(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        raise CLIError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (CLIError, mio.FormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
