"""Curriculum mixture of linear-Gaussian experts with Gaussian context gates.

The model is ``p(w|c) = sum_o p(c|o) p(o) / p(c) * N(w | A_o c + b_o, S_o)``.
All density math is done in log space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

COV_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class ModelError(ValueError):
    pass


def floor_covariance(S, floor=COV_FLOOR) -> np.ndarray:
    """Symmetrize and raise every eigenvalue of ``S`` to at least ``floor``.

    This is the maximum-likelihood covariance on the set {S : S >= floor*I},
    so a floored M-step is still an exact maximizer.
    """
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= floor:
        return S
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def gaussian_log_density(X, mean, cov) -> np.ndarray:
    """log N(x | mean, cov) for each row of X; ``mean`` may be per-row."""
    X = np.atleast_2d(X)
    try:
        L = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        raise ModelError("covariance is not positive definite") from None
    diff = X - mean
    z = linalg.solve_triangular(L, diff.T, lower=True)
    d = X.shape[1]
    return -0.5 * (d * _LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(L)))


@dataclass(frozen=True)
class LinearGaussianExpert:
    A: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if A.shape[0] != b.size or S.shape != (b.size, b.size):
            raise ModelError("expert dimensions are inconsistent")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Sigma", S)

    @property
    def dim_omega(self):
        return self.b.size

    @property
    def dim_context(self):
        return self.A.shape[1]

    def mean(self, C) -> np.ndarray:
        return np.atleast_2d(C) @ self.A.T + self.b

    def log_density(self, W, C) -> np.ndarray:
        return gaussian_log_density(np.atleast_2d(W), self.mean(C), self.Sigma)


@dataclass(frozen=True)
class ContextComponent:
    mu: np.ndarray
    Sigma_c: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        S = np.atleast_2d(np.asarray(self.Sigma_c, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise ModelError("context component dimensions are inconsistent")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma_c", S)

    def log_density(self, C) -> np.ndarray:
        return gaussian_log_density(np.atleast_2d(C), self.mu, self.Sigma_c)


@dataclass(frozen=True)
class GatingPrior:
    log_lambda: np.ndarray

    def __post_init__(self):
        ll = np.asarray(self.log_lambda, dtype=float).ravel()
        if ll.size < 1:
            raise ModelError("gating prior needs at least one component")
        if abs(np.exp(logsumexp(ll)) - 1.0) > 1e-10:
            raise ModelError("gating prior does not sum to one")
        object.__setattr__(self, "log_lambda", ll)

    @classmethod
    def uniform(cls, K):
        return cls(np.full(K, -np.log(K)))

    @classmethod
    def from_unnormalized(cls, log_weights):
        lw = np.asarray(log_weights, dtype=float)
        return cls(lw - logsumexp(lw))


@dataclass(frozen=True)
class CurriculumMoE:
    experts: List[LinearGaussianExpert]
    contexts: List[ContextComponent]
    gating: GatingPrior

    def __post_init__(self):
        K = len(self.experts)
        if K < 1 or len(self.contexts) != K or self.gating.log_lambda.size != K:
            raise ModelError("component counts disagree")
        dc = {e.dim_context for e in self.experts} | {c.mu.size for c in self.contexts}
        dw = {e.dim_omega for e in self.experts}
        if len(dc) != 1 or len(dw) != 1:
            raise ModelError("component dimensions disagree")

    @property
    def n_components(self):
        return len(self.experts)

    @property
    def dim_context(self):
        return self.experts[0].dim_context

    @property
    def dim_omega(self):
        return self.experts[0].dim_omega

    def permuted(self, order) -> "CurriculumMoE":
        return CurriculumMoE(
            [self.experts[o] for o in order],
            [self.contexts[o] for o in order],
            GatingPrior(self.gating.log_lambda[list(order)]),
        )


def expert_log_density(expert: LinearGaussianExpert, omega, context) -> float:
    omega = np.asarray(omega, dtype=float).ravel()
    context = np.asarray(context, dtype=float).ravel()
    if omega.size != expert.dim_omega or context.size != expert.dim_context:
        raise ModelError("dimension mismatch")
    return float(expert.log_density(omega[None], context[None])[0])


def context_log_density(ctx: ContextComponent, context) -> float:
    context = np.asarray(context, dtype=float).ravel()
    if context.size != ctx.mu.size:
        raise ModelError("dimension mismatch")
    return float(ctx.log_density(context[None])[0])


def _check_contexts(model: CurriculumMoE, C) -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != model.dim_context:
        raise ModelError(
            f"context dimension {C.shape[1]} does not match model dimension {model.dim_context}"
        )
    return C


def context_log_scores(model: CurriculumMoE, C) -> np.ndarray:
    """(K, N) matrix of log p(c|o) + log p(o)."""
    C = _check_contexts(model, C)
    return np.stack([ctx.log_density(C) for ctx in model.contexts]) + model.gating.log_lambda[:, None]


def expert_log_scores(model: CurriculumMoE, C, W) -> np.ndarray:
    """(K, N) matrix of log p(w|c, o)."""
    C = _check_contexts(model, C)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return np.stack([e.log_density(W, C) for e in model.experts])


def log_gating_posterior(model: CurriculumMoE, C) -> np.ndarray:
    s = context_log_scores(model, C)
    norm = logsumexp(s, axis=0)
    if np.any(~np.isfinite(norm)):
        raise ModelError("every component assigns zero density to a context")
    return s - norm


def gating_posterior(model: CurriculumMoE, context) -> np.ndarray:
    """p(o|c) for a single context (length K) or a batch (K, N)."""
    context = np.asarray(context, dtype=float)
    post = np.exp(log_gating_posterior(model, context))
    return post[:, 0] if context.ndim == 1 else post


def marginal_log_likelihood(model: CurriculumMoE, C, W) -> float:
    """sum_i log sum_o p(o|c_i) p(w_i|c_i, o)."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] == 0:
        raise ModelError("no data")
    joint = log_gating_posterior(model, C) + expert_log_scores(model, C, W)
    return float(np.sum(logsumexp(joint, axis=0)))


def predict_mean(model: CurriculumMoE, context) -> np.ndarray:
    """Affine prediction of the most probable component (lowest index on ties)."""
    context = np.asarray(context, dtype=float)
    C = _check_contexts(model, context)
    best = np.argmax(log_gating_posterior(model, C), axis=0)
    out = np.empty((C.shape[0], model.dim_omega))
    for o in np.unique(best):
        idx = best == o
        out[idx] = model.experts[o].mean(C[idx])
    return out[0] if context.ndim == 1 else out


def sample(model: CurriculumMoE, context, rng: np.random.Generator) -> np.ndarray:
    """Draw o ~ p(o|c) then w ~ N(A_o c + b_o, S_o)."""
    context = np.asarray(context, dtype=float)
    C = _check_contexts(model, context)
    post = np.exp(log_gating_posterior(model, C))
    out = np.empty((C.shape[0], model.dim_omega))
    for i in range(C.shape[0]):
        o = rng.choice(model.n_components, p=post[:, i] / post[:, i].sum())
        e = model.experts[o]
        out[i] = rng.multivariate_normal(e.mean(C[i])[0], e.Sigma, method="cholesky")
    return out[0] if context.ndim == 1 else out
