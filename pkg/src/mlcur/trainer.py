"""Curriculum training of the mixture of experts.

Each iteration recomputes responsibilities from the previous weights, updates
the per-component curriculum weights (auto-tuned entropy dual or fixed
entropy scale) and then refits experts, context components and the gating
prior by weighted maximum likelihood.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import List, NamedTuple, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_is_fitted

from .curriculum import (
    CurriculumError,
    log_responsibilities,
    log_row_entropy,
    log_update_fixed_alpha,
    solve_log_alpha_dual,
)
from .mixture import (
    COV_FLOOR,
    ContextComponent,
    CurriculumMoE,
    GatingPrior,
    LinearGaussianExpert,
    context_log_scores,
    expert_log_scores,
    floor_covariance,
    marginal_log_likelihood,
    predict_mean,
    sample,
)
from .validation import check_contexts, check_contexts_omegas, check_random_state

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-data-weights", "locality-violation", "no-responsibilities")
ENTROPY_FORMS = ("responsibility", "shannon")


class TrainingError(RuntimeError):
    pass


class DegenerateDesignError(TrainingError, ValueError):
    pass


# ---------------------------------------------------------------------------
# weighted M-steps


def _normalized(weights):
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    tot = w.sum()
    if tot <= 0:
        raise ValueError("weights sum to zero")
    return w / tot


def m_step_expert(C, W, weights, cov_floor=COV_FLOOR, fallback_ridge=None) -> LinearGaussianExpert:
    """Weighted linear-Gaussian regression of W on C.

    The affine map solves the weighted least-squares problem on centered
    data.  If the weighted context scatter is rank deficient the fit fails
    unless ``fallback_ridge`` is given, in which case the map is ridge
    regularized (the offset is never penalized).  The residual covariance is
    floored at ``cov_floor``.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    w = _normalized(weights)
    mc = w @ C
    mw = w @ W
    Cc = C - mc
    Wc = W - mw
    G = Cc.T @ (w[:, None] * Cc)
    rhs = Cc.T @ (w[:, None] * Wc)
    ev = np.linalg.eigvalsh(G)
    singular = ev.max() <= 0 or ev.min() <= 1e-10 * ev.max()
    if singular:
        if fallback_ridge is None:
            raise DegenerateDesignError(
                "weighted context design is rank deficient "
                f"(effective samples {1.0 / np.sum(w ** 2):.3g}); "
                "pass a fallback ridge or spread the weights over more samples"
            )
        G = G + fallback_ridge * np.eye(G.shape[0])
    At = linalg.solve(G, rhs, assume_a="pos")
    A = At.T
    b = mw - A @ mc
    R = Wc - Cc @ At
    S = R.T @ (w[:, None] * R)
    return LinearGaussianExpert(A, b, floor_covariance(S, cov_floor))


def m_step_context(C, weights, cov_floor=COV_FLOOR) -> ContextComponent:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    w = _normalized(weights)
    mu = w @ C
    D = C - mu
    return ContextComponent(mu, floor_covariance(D.T @ (w[:, None] * D), cov_floor))


def m_step_gating(nu) -> GatingPrior:
    """lambda_o proportional to the total weight of component o."""
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    mass = nu.sum(axis=1)
    if mass.sum() <= 0:
        raise ValueError("weights sum to zero")
    with np.errstate(divide="ignore"):
        return GatingPrior.from_unnormalized(np.log(mass))


def _log_gating(log_nu) -> GatingPrior:
    return GatingPrior.from_unnormalized(logsumexp(log_nu, axis=1))


# ---------------------------------------------------------------------------
# initialization


def _standardize(X):
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (X - X.mean(axis=0)) / sd


def _joint_coordinates(C, W):
    """Standardized contexts next to regression residuals of the weights.

    A global affine fit of W on C removes the context-driven variation that
    all modes share; what is left separates the modes.  The residuals are
    scaled to the same total variance as the standardized contexts.
    """
    Zc = _standardize(C)
    X = np.hstack([Zc, np.ones((Zc.shape[0], 1))])
    W = np.asarray(W, dtype=float)
    coef = np.linalg.lstsq(X, W, rcond=None)[0]
    Zw = W - X @ coef
    scale = np.sqrt(np.sum(Zw.var(axis=0)) / Zc.shape[1])
    return Zc, Zw / (scale if scale > 1e-12 else 1.0)


def seed_indices(C, W, K, rng) -> np.ndarray:
    """Pick K seed data by k-means in joint (context, weight residual) space.

    Modes that share the same contexts differ only in their weights, so the
    weight residuals take part in the distance.  Each seed is the datum
    closest to one cluster center.
    """
    Z = np.hstack(_joint_coordinates(C, W))
    km = KMeans(n_clusters=K, n_init=10, random_state=int(rng.integers(2**31 - 1))).fit(Z)
    d2 = ((Z[:, None, :] - km.cluster_centers_[None]) ** 2).sum(axis=2)
    idx = []
    for k in range(K):
        order = np.argsort(d2[:, k], kind="stable")
        idx.append(int(next(i for i in order if i not in idx)))
    return np.array(idx)


def local_weights(C, W, seed, n_local):
    """Gaussian kernel weights around datum ``seed`` in joint (context, weight) space.

    Both blocks are standardized so they contribute comparably; the kernel
    width is the distance to the ``n_local``-th nearest datum.
    """
    Zc, Zw = _joint_coordinates(C, W)
    d = np.sqrt(np.sum((Zc - Zc[seed]) ** 2, axis=1) + np.sum((Zw - Zw[seed]) ** 2, axis=1))
    n_local = int(np.clip(n_local, 1, len(d) - 1))
    h = np.partition(d, n_local)[n_local]
    h = h if h > 0 else 1.0
    return np.exp(-0.5 * (d / h) ** 2)


def init_model(C, W, K, rng, cov_floor=COV_FLOOR, fallback_ridge=1e-6, seeds=None) -> CurriculumMoE:
    N, dc = C.shape
    if seeds is None:
        seeds = seed_indices(C, W, K, rng)
    n_local = max(dc + 2, N // (4 * K))
    experts, contexts = [], []
    for s in seeds:
        w = local_weights(C, W, s, n_local)
        experts.append(m_step_expert(C, W, w, cov_floor, fallback_ridge))
        contexts.append(m_step_context(C, w, cov_floor))
    return CurriculumMoE(experts, contexts, GatingPrior.uniform(K))


# ---------------------------------------------------------------------------
# objectives


def joint_scores(model: CurriculumMoE, C, W, use_context=True) -> np.ndarray:
    """(K, N) log p(w|c,o) [+ log p(c|o)] + log p(o)."""
    s = expert_log_scores(model, C, W)
    if use_context:
        return s + context_log_scores(model, C)
    return s + model.gating.log_lambda[:, None]


def _weighted_sum(log_nu, scores):
    nu = np.exp(log_nu)
    return float(np.sum(np.where(nu > 0, nu * scores, 0.0)))


def lower_bound_objective(log_nu, log_resp, scores, alpha) -> float:
    """Variational lower bound with fixed entropy scale ``alpha``.

    ``sum nu*s + alpha * (-(1/K) sum nu (log nu - log r) + log K)``; the
    constant ``log K`` makes the bound equal :func:`eq7_objective` when the
    responsibilities are computed from ``log_nu`` itself.
    """
    K = log_nu.shape[0]
    ent = sum(log_row_entropy(log_nu[o], log_resp[o]) for o in range(K))
    return _weighted_sum(log_nu, scores) + alpha * (ent / K + np.log(K))


def eq7_objective(log_nu, scores, alpha) -> float:
    """Weighted log-likelihood plus alpha times the entropy of the averaged weights."""
    K = log_nu.shape[0]
    log_agg = logsumexp(log_nu, axis=0) - np.log(K)
    return _weighted_sum(log_nu, scores) + alpha * log_row_entropy(log_agg)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Settings of one curriculum training run.

    ``alpha=None`` selects the auto-tuned mode, which needs ``n_eff``
    (defaults to half of N/K).  A numeric ``alpha`` selects the fixed-scale
    update.
    """

    n_components: int = 2
    n_eff: Optional[float] = None
    alpha: Optional[float] = None
    max_iters: int = 500
    rel_tol: float = 1e-6
    patience: int = 3
    seed: int = 0
    ablation: str = "none"
    entropy_form: str = "responsibility"
    learn_gating: bool = True
    cov_floor: float = COV_FLOOR
    fallback_ridge: float = 1e-6

    @property
    def mode(self) -> str:
        return "autotuned" if self.alpha is None else "fixed"

    def resolved_n_eff(self, N) -> float:
        return float(self.n_eff) if self.n_eff is not None else max(1.0, 0.5 * N / self.n_components)

    def validate(self, N):
        if self.n_components < 1:
            raise ValueError("n_components must be at least 1")
        if N < self.n_components:
            raise ValueError(f"need at least K={self.n_components} samples, got {N}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.entropy_form not in ENTROPY_FORMS:
            raise ValueError(f"unknown entropy form {self.entropy_form!r}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.alpha is None:
            n_eff = self.resolved_n_eff(N)
            if not 1 <= n_eff <= N:
                raise ValueError(f"n_eff must lie in [1, N={N}], got {n_eff}")

    def to_dict(self):
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    weighted_loglik: float
    entropy: float
    component_entropy: np.ndarray
    bound_entropy: np.ndarray
    alpha: np.ndarray
    context_means: np.ndarray
    context_covs: np.ndarray
    relaxed: np.ndarray
    reseeded: bool = False

    @property
    def effective_samples(self) -> np.ndarray:
        return np.exp(self.component_entropy)


@dataclass
class TrainTrace:
    records: List[IterationRecord] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def append(self, rec):
        self.records.append(rec)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def effective_samples(self) -> np.ndarray:
        return np.array([r.effective_samples for r in self.records])

    def to_dict(self):
        return {
            "converged": self.converged,
            "records": [
                {
                    "iteration": r.iteration,
                    "objective": r.objective,
                    "weighted_loglik": r.weighted_loglik,
                    "entropy": r.entropy,
                    "component_entropy": r.component_entropy.tolist(),
                    "bound_entropy": r.bound_entropy.tolist(),
                    "alpha": r.alpha.tolist(),
                    "context_means": r.context_means.tolist(),
                    "context_covs": r.context_covs.tolist(),
                    "relaxed": r.relaxed.tolist(),
                    "reseeded": r.reseeded,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d):
        recs = [
            IterationRecord(
                iteration=r["iteration"],
                objective=r["objective"],
                weighted_loglik=r["weighted_loglik"],
                entropy=r["entropy"],
                component_entropy=np.array(r["component_entropy"], dtype=float),
                bound_entropy=np.array(r["bound_entropy"], dtype=float),
                alpha=np.array(r["alpha"], dtype=float),
                context_means=np.array(r["context_means"], dtype=float),
                context_covs=np.array(r["context_covs"], dtype=float),
                relaxed=np.array(r["relaxed"], dtype=bool),
                reseeded=r["reseeded"],
            )
            for r in d["records"]
        ]
        return cls(recs, d.get("converged", False))


class TrainResult(NamedTuple):
    model: CurriculumMoE
    trace: TrainTrace
    log_nu: np.ndarray

    @property
    def nu(self):
        return np.exp(self.log_nu)


def _update_weights(scores, log_r, config, h_min):
    """One curriculum-weight step; returns (log_nu, alphas, relaxed flags)."""
    K, N = scores.shape
    relaxed = np.zeros(K, dtype=bool)
    if config.ablation == "no-data-weights":
        return np.full((K, N), -np.log(N)), np.zeros(K), relaxed
    if config.alpha is not None:
        return log_update_fixed_alpha(scores, log_r, config.alpha, K), np.full(K, float(config.alpha)), relaxed
    log_nu = np.empty((K, N))
    alphas = np.empty(K)
    for o in range(K):
        sol = solve_log_alpha_dual(scores[o], log_r[o], h_min)
        if not sol.feasible:
            # the responsibilities cap the attainable bound entropy below h_min;
            # fall back to the plain entropy constraint for this component
            sol = solve_log_alpha_dual(scores[o], 0.0, h_min)
            relaxed[o] = True
        log_nu[o] = sol.log_nu
        alphas[o] = sol.alpha
    return log_nu, alphas, relaxed


def _objective(log_nu, log_r, scores, alphas, config, h_min):
    K = log_nu.shape[0]
    if config.alpha is not None or config.ablation == "no-data-weights":
        alpha = config.alpha or 0.0
        if config.ablation == "no-responsibilities" or config.entropy_form == "shannon":
            ent = sum(log_row_entropy(log_nu[o]) for o in range(K))
            return _weighted_sum(log_nu, scores) + alpha * ent / K
        return lower_bound_objective(log_nu, log_r, scores, alpha)
    # auto-tuned: Lagrangian of the entropy-constrained problem
    total = _weighted_sum(log_nu, scores)
    for o in range(K):
        total += alphas[o] * (log_row_entropy(log_nu[o], log_r[o]) - h_min)
    return total


def _fit_components(C, W, log_nu, model, config, use_context):
    nu = np.exp(log_nu)
    K = nu.shape[0]
    experts = [m_step_expert(C, W, nu[o], config.cov_floor, config.fallback_ridge) for o in range(K)]
    if use_context:
        contexts = [m_step_context(C, nu[o], config.cov_floor) for o in range(K)]
    else:
        contexts = model.contexts
    gating = _log_gating(log_nu) if config.learn_gating else model.gating
    return CurriculumMoE(experts, contexts, gating)


def train_ml_cur(C, W, config: TrainConfig, initial_model: CurriculumMoE = None) -> TrainResult:
    """Train the curriculum mixture of experts on contexts C (N, dc) and weights W (N, dw)."""
    C, W = check_contexts_omegas(C, W)
    N = C.shape[0]
    config.validate(N)
    K = config.n_components
    rng = np.random.default_rng(config.seed)
    model = initial_model if initial_model is not None else init_model(
        C, W, K, rng, config.cov_floor, config.fallback_ridge
    )
    if model.n_components != K:
        raise ValueError("initial model has the wrong number of components")
    use_context = config.ablation != "locality-violation"
    ignore_resp = config.ablation == "no-responsibilities" or config.entropy_form == "shannon"
    h_min = np.log(config.resolved_n_eff(N)) if config.alpha is None else None

    log_nu = np.full((K, N), -np.log(N))
    trace = TrainTrace()
    scores = joint_scores(model, C, W, use_context)
    prev = None
    calm = 0
    thin = np.zeros(K, dtype=int)
    reseeded = np.zeros(K, dtype=bool)

    for it in range(1, config.max_iters + 1):
        log_r = log_responsibilities(log_nu)
        log_r_used = np.zeros_like(log_r) if ignore_resp else log_r
        log_nu, alphas, relaxed = _update_weights(scores, log_r_used, config, h_min)
        model = _fit_components(C, W, log_nu, model, config, use_context)
        scores = joint_scores(model, C, W, use_context)
        obj = _objective(log_nu, log_r_used, scores, alphas, config, h_min)

        comp_ent = np.array([log_row_entropy(log_nu[o]) for o in range(K)])
        did_reseed = False
        thin = np.where(np.exp(comp_ent) < 1.5, thin + 1, 0)
        for o in np.flatnonzero(thin >= 5):
            if reseeded[o]:
                raise TrainingError(
                    f"component {o} collapsed onto a single sample again after re-seeding; "
                    "increase alpha or n_eff"
                )
            worst = int(np.argmin(scores.max(axis=0)))
            log.info("re-seeding collapsed component %d at datum %d", o, worst)
            w = local_weights(C, W, worst, max(C.shape[1] + 2, N // (2 * K)))
            experts = list(model.experts)
            contexts = list(model.contexts)
            experts[o] = m_step_expert(C, W, w, config.cov_floor, config.fallback_ridge)
            contexts[o] = m_step_context(C, w, config.cov_floor)
            model = CurriculumMoE(experts, contexts, model.gating)
            log_nu[o] = -np.log(N)
            scores = joint_scores(model, C, W, use_context)
            reseeded[o] = True
            thin[o] = 0
            did_reseed = True

        trace.append(
            IterationRecord(
                iteration=it,
                objective=obj,
                weighted_loglik=_weighted_sum(log_nu, scores),
                entropy=log_row_entropy(logsumexp(log_nu, axis=0) - np.log(K)),
                component_entropy=comp_ent,
                bound_entropy=np.array([log_row_entropy(log_nu[o], log_r_used[o]) for o in range(K)]),
                alpha=alphas,
                context_means=np.array([c.mu for c in model.contexts]),
                context_covs=np.array([c.Sigma_c for c in model.contexts]),
                relaxed=relaxed,
                reseeded=did_reseed,
            )
        )
        if prev is not None and not did_reseed:
            change = abs(obj - prev) / max(abs(prev), 1.0)
            calm = calm + 1 if change < config.rel_tol else 0
            if calm >= config.patience:
                trace.converged = True
                break
        prev = obj

    if not use_context:
        # locality was ignored while training; fit the context gates now for inference
        nu = np.exp(log_nu)
        contexts = [m_step_context(C, nu[o], config.cov_floor) for o in range(K)]
        model = CurriculumMoE(model.experts, contexts, model.gating)
    return TrainResult(model, trace, log_nu)


class SingleExpertResult(NamedTuple):
    expert: LinearGaussianExpert
    context: ContextComponent
    nu: np.ndarray
    trace: TrainTrace


def train_single(C, W, config: TrainConfig) -> SingleExpertResult:
    """Single-expert curriculum: weights proportional to (p(w|c) p(c))^(1/alpha)."""
    if config.n_components != 1:
        raise ValueError("train_single needs n_components=1")
    res = train_ml_cur(C, W, config)
    return SingleExpertResult(res.model.experts[0], res.model.contexts[0], res.nu[0], res.trace)


# ---------------------------------------------------------------------------
# estimator


class MLCurRegressor(RegressorMixin, BaseEstimator):
    """Curriculum mixture of linear experts, sklearn style.

    Parameters
    ----------
    n_components : int
        Number of experts K.
    n_eff : float, optional
        Desired effective samples per component in the auto-tuned mode.
    alpha : float, optional
        Fixed entropy scale; when given the auto-tuning is disabled.
    ablation : str
        One of ``none``, ``no-data-weights``, ``locality-violation``,
        ``no-responsibilities``.
    random_state : int

    ``fit(C, W)`` takes contexts and primitive weights; ``predict`` returns
    the mean of the most probable expert.
    """

    def __init__(self, n_components=2, n_eff=None, alpha=None, max_iter=500, tol=1e-6,
                 ablation="none", entropy_form="responsibility", learn_gating=True,
                 cov_floor=COV_FLOOR, random_state=0):
        self.n_components = n_components
        self.n_eff = n_eff
        self.alpha = alpha
        self.max_iter = max_iter
        self.tol = tol
        self.ablation = ablation
        self.entropy_form = entropy_form
        self.learn_gating = learn_gating
        self.cov_floor = cov_floor
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            n_components=self.n_components, n_eff=self.n_eff, alpha=self.alpha,
            max_iters=self.max_iter, rel_tol=self.tol, seed=self.random_state,
            ablation=self.ablation, entropy_form=self.entropy_form,
            learn_gating=self.learn_gating, cov_floor=self.cov_floor,
        )

    def fit(self, C, W):
        C, W = check_contexts_omegas(C, W)
        res = train_ml_cur(C, W, self._config())
        self.model_ = res.model
        self.trace_ = res.trace
        self.log_nu_ = res.log_nu
        self.n_features_in_ = C.shape[1]
        self.n_iter_ = len(res.trace)
        return self

    @property
    def nu_(self):
        return np.exp(self.log_nu_)

    def predict(self, C):
        check_is_fitted(self, "model_")
        return predict_mean(self.model_, check_contexts(C, self.n_features_in_))

    def sample(self, C, random_state=None):
        check_is_fitted(self, "model_")
        return sample(self.model_, check_contexts(C, self.n_features_in_), check_random_state(random_state))

    def score(self, C, W):
        """Mean marginal log-likelihood per sample."""
        check_is_fitted(self, "model_")
        C, W = check_contexts_omegas(C, W)
        return marginal_log_likelihood(self.model_, C, W) / C.shape[0]
