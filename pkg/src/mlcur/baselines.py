"""Reference policies: an EM-trained mixture of experts and k-nearest neighbours."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .mixture import COV_FLOOR, LinearGaussianExpert, ModelError
from .trainer import TrainingError, init_model, m_step_expert
from .validation import check_contexts, check_contexts_omegas, check_random_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftmaxGate:
    """p(o|c) = softmax(coef @ c + intercept); the last row is pinned to zero."""

    coef: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        coef = np.atleast_2d(np.asarray(self.coef, dtype=float))
        icpt = np.asarray(self.intercept, dtype=float).ravel()
        if coef.shape[0] != icpt.size:
            raise ModelError("gate coefficient and intercept disagree")
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "intercept", icpt)

    @classmethod
    def uniform(cls, K, dc):
        return cls(np.zeros((K, dc)), np.zeros(K))

    @property
    def n_components(self):
        return self.intercept.size

    def log_posterior(self, C) -> np.ndarray:
        """(K, N) log gate probabilities."""
        z = np.atleast_2d(C) @ self.coef.T + self.intercept
        return (z - logsumexp(z, axis=1, keepdims=True)).T


@dataclass(frozen=True)
class StandardMoE:
    experts: List[LinearGaussianExpert]
    gate: SoftmaxGate

    def __post_init__(self):
        if len(self.experts) != self.gate.n_components:
            raise ModelError("component counts disagree")
        if {e.dim_context for e in self.experts} != {self.gate.coef.shape[1]}:
            raise ModelError("context dimensions disagree")

    @property
    def n_components(self):
        return len(self.experts)

    @property
    def dim_context(self):
        return self.gate.coef.shape[1]

    def _joint(self, C, W):
        return self.gate.log_posterior(C) + np.stack([e.log_density(W, C) for e in self.experts])

    def log_likelihood(self, C, W) -> float:
        return float(np.sum(logsumexp(self._joint(C, W), axis=0)))

    def predict_mean(self, C) -> np.ndarray:
        C = np.atleast_2d(C)
        best = np.argmax(self.gate.log_posterior(C), axis=0)
        out = np.empty((C.shape[0], self.experts[0].dim_omega))
        for o in np.unique(best):
            idx = best == o
            out[idx] = self.experts[o].mean(C[idx])
        return out

    def sample(self, C, rng) -> np.ndarray:
        C = np.atleast_2d(C)
        post = np.exp(self.gate.log_posterior(C))
        out = np.empty((C.shape[0], self.experts[0].dim_omega))
        for i in range(C.shape[0]):
            o = rng.choice(self.n_components, p=post[:, i] / post[:, i].sum())
            e = self.experts[o]
            out[i] = rng.multivariate_normal(e.mean(C[i])[0], e.Sigma, method="cholesky")
        return out


def _gate_objective(beta, X, Q):
    z = np.hstack([X @ beta.T, np.zeros((X.shape[0], 1))])
    return float(np.sum(Q * (z - logsumexp(z, axis=1, keepdims=True))))


def fit_softmax_gate(X, Q, beta0, n_steps=10, damping=1e-8):
    """Damped Newton ascent on sum_i sum_o Q[i, o] log softmax(x_i)[o].

    ``X`` includes the intercept column, ``beta0`` has shape (K-1, D).
    Every accepted step increases the objective (backtracking line search).
    """
    N, D = X.shape
    K = Q.shape[1]
    beta = beta0.copy()
    f = _gate_objective(beta, X, Q)
    for _ in range(n_steps):
        z = np.hstack([X @ beta.T, np.zeros((N, 1))])
        P = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        R = (Q - P)[:, : K - 1]
        grad = (R.T @ X).ravel()
        Pk = P[:, : K - 1]
        H = np.zeros(((K - 1) * D, (K - 1) * D))
        for a in range(K - 1):
            for b in range(a, K - 1):
                w = Pk[:, a] * ((a == b) - Pk[:, b])
                blk = X.T @ (w[:, None] * X)
                H[a * D:(a + 1) * D, b * D:(b + 1) * D] = blk
                H[b * D:(b + 1) * D, a * D:(a + 1) * D] = blk
        H += (damping * max(1.0, np.trace(H) / H.shape[0])) * np.eye(H.shape[0])
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except linalg.LinAlgError:
            step = grad
        step = step.reshape(K - 1, D)
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            fc = _gate_objective(cand, X, Q)
            if fc >= f:
                break
            t *= 0.5
        else:
            break
        if fc - f <= 1e-14 * max(1.0, abs(f)):
            beta, f = cand, fc
            break
        beta, f = cand, fc
    return beta


@dataclass
class EMResult:
    model: StandardMoE
    log_likelihoods: np.ndarray
    converged: bool


def train_em(C, W, n_components, max_iters=300, rel_tol=1e-8, seed=0, newton_steps=10,
             cov_floor=COV_FLOOR, fallback_ridge=1e-6) -> EMResult:
    """Expectation maximization for a softmax-gated mixture of linear experts."""
    C, W = check_contexts_omegas(C, W)
    N, dc = C.shape
    K = int(n_components)
    if K < 1 or N < K:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    rng = np.random.default_rng(seed)
    experts = list(init_model(C, W, K, rng, cov_floor, fallback_ridge).experts)
    gate = SoftmaxGate.uniform(K, dc)
    X = np.hstack([C, np.ones((N, 1))])
    beta = np.zeros((K - 1, dc + 1))
    model = StandardMoE(experts, gate)
    lls = []
    converged = False
    starved = np.zeros(K, dtype=int)
    for _ in range(max_iters):
        joint = model._joint(C, W)
        norm = logsumexp(joint, axis=0)
        lls.append(float(norm.sum()))
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) < rel_tol * max(1.0, abs(lls[-2])):
            converged = True
            break
        Q = np.exp(joint - norm)
        mass = Q.sum(axis=1)
        new_experts = []
        for o in range(K):
            if mass[o] < 1e-8:
                # nothing to refit from; keep the expert and let the gate decide
                starved[o] += 1
                if starved[o] > 20:
                    raise TrainingError(f"EM component {o} lost all responsibility")
                new_experts.append(experts[o])
                continue
            starved[o] = 0
            new_experts.append(m_step_expert(C, W, Q[o], cov_floor, fallback_ridge))
        experts = new_experts
        if K > 1:
            beta = fit_softmax_gate(X, Q.T, beta, newton_steps)
        coef = np.vstack([beta[:, :dc], np.zeros((1, dc))])
        icpt = np.concatenate([beta[:, dc], [0.0]])
        model = StandardMoE(experts, SoftmaxGate(coef, icpt))
    return EMResult(model, np.array(lls), converged)


def knn_predict(C_train, W_train, context, k=1) -> np.ndarray:
    """Mean weight vector of the ``k`` nearest training contexts.

    Contexts are z-scored with the training statistics; ties in distance are
    broken by datum index.
    """
    C_train, W_train = check_contexts_omegas(C_train, W_train)
    N = C_train.shape[0]
    if N == 0:
        raise ValueError("no training data")
    if not 1 <= k <= N:
        raise ValueError(f"k must lie in [1, {N}], got {k}")
    Q = check_contexts(context, C_train.shape[1])
    mu = C_train.mean(axis=0)
    sd = C_train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (C_train - mu) / sd
    Zq = (Q - mu) / sd
    out = np.empty((Q.shape[0], W_train.shape[1]))
    for i, q in enumerate(Zq):
        d = np.sum((Z - q) ** 2, axis=1)
        nn = np.argsort(d, kind="stable")[:k]
        out[i] = W_train[nn].mean(axis=0)
    single = np.asarray(context).ndim == 1 and np.asarray(context).size == C_train.shape[1]
    return out[0] if single else out


class EMMixtureOfExperts(RegressorMixin, BaseEstimator):
    """Softmax-gated mixture of linear experts fitted by EM.

    Parameters
    ----------
    n_components : int
    max_iter : int
    tol : float
        Relative log-likelihood change at which EM stops.
    newton_steps : int
        Newton steps for the gate per M-step.
    random_state : int
    """

    def __init__(self, n_components=2, max_iter=300, tol=1e-8, newton_steps=10,
                 cov_floor=COV_FLOOR, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.newton_steps = newton_steps
        self.cov_floor = cov_floor
        self.random_state = random_state

    def fit(self, C, W):
        C, W = check_contexts_omegas(C, W)
        res = train_em(C, W, self.n_components, self.max_iter, self.tol, self.random_state,
                       self.newton_steps, self.cov_floor)
        self.model_ = res.model
        self.log_likelihoods_ = res.log_likelihoods
        self.converged_ = res.converged
        self.n_features_in_ = C.shape[1]
        return self

    def predict(self, C):
        check_is_fitted(self, "model_")
        return self.model_.predict_mean(check_contexts(C, self.n_features_in_))

    def sample(self, C, random_state=None):
        check_is_fitted(self, "model_")
        return self.model_.sample(check_contexts(C, self.n_features_in_), check_random_state(random_state))

    def score(self, C, W):
        check_is_fitted(self, "model_")
        C, W = check_contexts_omegas(C, W)
        return self.model_.log_likelihood(C, W) / C.shape[0]


class KNNPolicy(RegressorMixin, BaseEstimator):
    """Average of the weight vectors of the nearest demonstrations."""

    def __init__(self, n_neighbors=1):
        self.n_neighbors = n_neighbors

    def fit(self, C, W):
        C, W = check_contexts_omegas(C, W)
        if not 1 <= self.n_neighbors <= C.shape[0]:
            raise ValueError(f"n_neighbors must lie in [1, {C.shape[0]}]")
        self.C_ = C
        self.W_ = W
        self.n_features_in_ = C.shape[1]
        return self

    def predict(self, C):
        check_is_fitted(self, "C_")
        C = check_contexts(C, self.n_features_in_)
        return knn_predict(self.C_, self.W_, C, self.n_neighbors)
