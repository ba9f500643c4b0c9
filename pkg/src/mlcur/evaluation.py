"""Rollout metrics and multi-seed experiment protocols on the reacher."""
from __future__ import annotations

import csv
import io
import logging
import traceback
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .baselines import EMMixtureOfExperts, KNNPolicy, StandardMoE
from .mixture import CurriculumMoE, marginal_log_likelihood, predict_mean, sample
from .promp import BasisConfig, project_trajectory, reconstruct_states, Trajectory
from .reacher import (
    N_JOINTS,
    ReacherWorld,
    collides_batch,
    end_effector,
    generate_reacher_dataset,
)
from .trainer import MLCurRegressor, TrainTrace

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-data-weights", "locality-violation", "no-responsibilities")
SUCCESS_RADIUS = 0.5


@dataclass
class EvalReport:
    """Rollout metrics of one policy on one test set.

    ``success_rate`` is the collision-free reach rate: rollouts that avoid
    every obstacle and end within ``success_radius`` of the target.
    """

    collision_rate: float
    mean_distance_error: float
    success_rate: float
    n_contexts: int
    test_log_likelihood: Optional[float] = None
    effective_samples: Optional[List[float]] = None
    success_radius: float = SUCCESS_RADIUS
    rollout_mode: str = "argmax"
    per_seed: List[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("collision_rate", "success_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not (np.isnan(self.mean_distance_error) or self.mean_distance_error >= 0):
            raise ValueError("mean distance error must be non-negative")

    def to_dict(self):
        return asdict(self)


def encode_demos(demos, basis: BasisConfig):
    """Contexts (N, 2) and stacked primitive weights (N, 10 * n_basis)."""
    C = np.array([d.context for d in demos])
    W = np.array([project_trajectory(Trajectory(d.joints), basis) for d in demos])
    return C, W


def rollout(omegas, basis: BasisConfig, world: ReacherWorld):
    """Decode weights to (M, n_steps, 10) joint trajectories."""
    times = np.linspace(0.0, 1.0, world.n_steps)
    return reconstruct_states(omegas, basis, times)


def _as_predictor(model, rollout_mode, rng) -> Callable:
    if isinstance(model, CurriculumMoE):
        if rollout_mode == "sample":
            return lambda C: sample(model, C, rng)
        return lambda C: predict_mean(model, C)
    if isinstance(model, StandardMoE):
        if rollout_mode == "sample":
            return lambda C: model.sample(C, rng)
        return model.predict_mean
    if rollout_mode == "sample" and hasattr(model, "sample"):
        return lambda C: model.sample(C, rng)
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def evaluate_model(model, world: ReacherWorld, test_contexts, basis: BasisConfig,
                   rollout_mode="argmax", seed=0, success_radius=SUCCESS_RADIUS,
                   test_omegas=None) -> EvalReport:
    """Roll out a policy on each test context and score the motions.

    ``model`` is a :class:`CurriculumMoE` or :class:`StandardMoE`, a fitted estimator with
    ``predict`` (and ``sample`` for stochastic rollouts), or any callable
    mapping contexts (M, 2) to weights (M, 10 * n_basis).
    """
    if rollout_mode not in ("argmax", "sample"):
        raise ValueError("rollout_mode must be 'argmax' or 'sample'")
    C = np.atleast_2d(np.asarray(test_contexts, dtype=float))
    if C.shape[0] == 0:
        raise ValueError("no test contexts")
    if C.shape[1] != 2:
        raise ValueError(f"reacher contexts are 2-D, got {C.shape[1]}")
    rng = np.random.default_rng(seed)
    W = np.atleast_2d(_as_predictor(model, rollout_mode, rng)(C))
    expected = N_JOINTS * basis.n_basis
    if W.shape != (C.shape[0], expected):
        raise ValueError(
            f"policy returned weights of shape {W.shape}; the world needs ({C.shape[0]}, {expected})"
        )
    Q = rollout(W, basis, world)
    collided = collides_batch(Q, world)
    err = np.linalg.norm(end_effector(Q[:, -1], world) - C, axis=1)
    free = ~collided
    mde = float(err[free].mean()) if free.any() else float("nan")
    success = free & (err < success_radius)
    tll = None
    if test_omegas is not None:
        tll = _log_likelihood(model, C, test_omegas)
    ess = None
    if hasattr(model, "trace_") and len(model.trace_):
        ess = model.trace_[-1].effective_samples.tolist()
    return EvalReport(
        collision_rate=float(collided.mean()),
        mean_distance_error=mde,
        success_rate=float(success.mean()),
        n_contexts=int(C.shape[0]),
        test_log_likelihood=tll,
        effective_samples=ess,
        success_radius=success_radius,
        rollout_mode=rollout_mode,
    )


def _log_likelihood(model, C, W):
    if isinstance(model, CurriculumMoE):
        return marginal_log_likelihood(model, C, W) / C.shape[0]
    if hasattr(model, "model_") and hasattr(model, "score"):
        return float(model.score(C, W))
    if hasattr(model, "log_likelihood"):
        return model.log_likelihood(C, W) / C.shape[0]
    return None


# ---------------------------------------------------------------------------
# experiments


@dataclass
class AblationSpec:
    """Which variants to train, on which seeds, on what data."""

    variants: Sequence[str] = ("full",)
    seeds: Sequence[int] = (0,)
    n_train: int = 1000
    n_test: int = 250
    mode_mix: Sequence[float] = (0.45, 0.45, 0.10)
    n_components: int = 2
    n_eff: Optional[float] = None
    alpha: Optional[float] = None
    n_basis: int = 10
    ridge: float = 1e-6
    max_iters: int = 500
    success_radius: float = SUCCESS_RADIUS
    rollout_mode: str = "argmax"
    world: Optional[dict] = None

    def __post_init__(self):
        if self.rollout_mode not in ("argmax", "sample"):
            raise ValueError("rollout_mode must be 'argmax' or 'sample'")
        if len(self.seeds) == 0:
            raise ValueError("need at least one seed")
        bad = [v for v in self.variants if v not in VARIANTS + ("em", "knn")]
        if bad:
            raise ValueError(f"unknown variants {bad}")

    @property
    def test_fraction(self):
        return self.n_test / (self.n_train + self.n_test)

    def make_world(self):
        return ReacherWorld.from_dict(self.world) if self.world else ReacherWorld()

    def to_dict(self):
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["seeds"] = list(self.seeds)
        d["mode_mix"] = list(self.mode_mix)
        d["test_fraction"] = self.test_fraction
        return d


def make_split(spec: AblationSpec, seed, world=None):
    """Train/test demos drawn from one sample, split without overlap."""
    world = world or spec.make_world()
    demos = generate_reacher_dataset(world, spec.n_train + spec.n_test, spec.mode_mix, seed)
    basis = BasisConfig(spec.n_basis, ridge=spec.ridge)
    C, W = encode_demos(demos, basis)
    perm = np.random.default_rng([seed, 1]).permutation(len(demos))
    tr, te = perm[: spec.n_train], perm[spec.n_train:]
    return world, basis, (C[tr], W[tr]), (C[te], W[te])


def build_estimator(variant, spec: AblationSpec, seed):
    if variant == "em":
        return EMMixtureOfExperts(spec.n_components, max_iter=spec.max_iters, random_state=seed)
    if variant == "knn":
        return KNNPolicy(1)
    ablation = "none" if variant == "full" else variant
    return MLCurRegressor(spec.n_components, n_eff=spec.n_eff, alpha=spec.alpha,
                          max_iter=spec.max_iters, ablation=ablation, random_state=seed)


def run_experiment(spec: AblationSpec):
    """Train and evaluate every (variant, seed) pair.

    Returns ``(rows, summary)``: one row per pair and one aggregate per
    variant with mean and standard deviation over the successful seeds.
    Failures are recorded in their row and do not stop the batch.
    """
    rows = []
    for seed in spec.seeds:
        world, basis, (Ctr, Wtr), (Cte, Wte) = make_split(spec, seed)
        for variant in spec.variants:
            row = {"variant": variant, "seed": seed, "status": "ok", "error": ""}
            try:
                est = build_estimator(variant, spec, seed).fit(Ctr, Wtr)
                rep = evaluate_model(est, world, Cte, basis, spec.rollout_mode, seed,
                                     spec.success_radius, test_omegas=Wte)
                row.update(
                    collision_rate=rep.collision_rate,
                    mean_distance_error=rep.mean_distance_error,
                    success_rate=rep.success_rate,
                    test_log_likelihood=rep.test_log_likelihood,
                )
            except Exception as exc:  # recorded per row, batch continues
                log.warning("variant %s seed %s failed: %s", variant, seed, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                           collision_rate=np.nan, mean_distance_error=np.nan,
                           success_rate=np.nan, test_log_likelihood=np.nan)
                log.debug(traceback.format_exc())
            rows.append(row)
    return rows, aggregate(rows, spec.variants)


METRICS = ("collision_rate", "mean_distance_error", "success_rate", "test_log_likelihood")


def aggregate(rows, variants) -> List[dict]:
    out = []
    for v in variants:
        sel = [r for r in rows if r["variant"] == v and r["status"] == "ok"]
        agg = {"variant": v, "n_ok": len(sel), "n_failed": sum(r["variant"] == v for r in rows) - len(sel)}
        for m in METRICS:
            vals = np.array([r[m] for r in sel if r[m] is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            agg[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            agg[f"{m}_std"] = float(vals.std()) if vals.size else float("nan")
        out.append(agg)
    return out


def results_table(rows, summary) -> str:
    """CSV text: one row per (variant, seed) run, then one aggregate row per variant.

    Aggregate rows carry the mean in the metric columns and the standard
    deviation in the ``*_std`` columns.
    """
    buf = io.StringIO()
    cols = ["kind", "variant", "seed", "status"]
    for m in METRICS:
        cols += [m, f"{m}_std"]
    cols.append("error")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)

    def num(v):
        return "" if v is None else repr(float(v))

    for r in rows:
        vals = []
        for m in METRICS:
            vals += [num(r[m]), ""]
        wr.writerow(["run", r["variant"], r["seed"], r["status"], *vals, r["error"]])
    for a in summary:
        vals = []
        for m in METRICS:
            vals += [num(a[f"{m}_mean"]), num(a[f"{m}_std"])]
        wr.writerow(["aggregate", a["variant"], "", f"{a['n_ok']} ok, {a['n_failed']} failed", *vals, ""])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# curriculum traces


def _ellipse(cov):
    """Semi-axes (1 std) and orientation in radians of a 2-D covariance."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    major = vecs[:, 1]
    return np.sqrt(vals[1]), np.sqrt(vals[0]), float(np.arctan2(major[1], major[0]))


TRACE_COLUMNS = ("iteration", "component", "objective", "entropy", "alpha", "effective_samples",
                 "mean_x", "mean_y", "semi_major", "semi_minor", "angle")


def curriculum_trace_export(trace: TrainTrace) -> List[dict]:
    """One row per (iteration, component) with curriculum and context-gate statistics."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    rows = []
    for rec in trace:
        for o in range(len(rec.component_entropy)):
            mu = rec.context_means[o]
            cov = rec.context_covs[o]
            if cov.shape == (2, 2):
                a, b, ang = _ellipse(cov)
            else:
                a, b, ang = float(np.sqrt(np.max(np.linalg.eigvalsh(cov)))), float(np.sqrt(np.min(np.linalg.eigvalsh(cov)))), 0.0
            rows.append({
                "iteration": rec.iteration,
                "component": o,
                "objective": rec.objective,
                "entropy": rec.entropy,
                "alpha": float(rec.alpha[o]),
                "effective_samples": float(np.exp(rec.component_entropy[o])),
                "mean_x": float(mu[0]),
                "mean_y": float(mu[1]) if mu.size > 1 else 0.0,
                "semi_major": float(a),
                "semi_minor": float(b),
                "angle": float(ang),
            })
    return rows


def trace_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def plant_outliers(C, W, fraction, world: ReacherWorld, rng, kind="mismatched", spread=1.0):
    """Replace a ``fraction`` of the demonstrations by outliers.

    Every outlier gets a fresh random target.  With ``kind="mismatched"`` it
    keeps its original, valid motion, which now belongs to a different
    target.  With ``kind="incoherent"`` the weight vector is redrawn from a
    Gaussian with the data's per-dimension mean and ``spread`` times its
    per-dimension standard deviation.  Returns the new arrays and a boolean
    outlier mask.
    """
    if kind not in ("mismatched", "incoherent"):
        raise ValueError("kind must be 'mismatched' or 'incoherent'")
    C = np.array(C, dtype=float)
    W = np.array(W, dtype=float)
    N = C.shape[0]
    n_out = int(round(fraction * N))
    idx = rng.choice(N, size=n_out, replace=False)
    C[idx] = world.sample_targets(n_out, rng)
    if kind == "incoherent":
        W[idx] = W.mean(axis=0) + spread * W.std(axis=0) * rng.standard_normal((n_out, W.shape[1]))
    mask = np.zeros(N, dtype=bool)
    mask[idx] = True
    return C, W, mask
