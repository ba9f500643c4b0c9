"""Curriculum weights: responsibilities, entropies and weight updates.

Weights are stored per component as rows of a (K, N) matrix; every row is a
distribution over the N data points.  The training loop keeps them in log
space so that points abandoned by every component still have well defined
responsibilities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

ALPHA_MIN = 1e-6
ALPHA_MAX = 1e8
_TINY = 1e-300


class CurriculumError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyBudget:
    """Minimum per-component entropy, ``h_min = log(n_eff)``."""

    n_eff: float

    def __post_init__(self):
        if not (np.isfinite(self.n_eff) and self.n_eff > 0):
            raise CurriculumError("n_eff must be positive")

    @property
    def h_min(self) -> float:
        return float(np.log(self.n_eff))


def _xlogy_rows(p, logp):
    # 0 * log 0 := 0
    return np.where(p > 0, p * np.where(p > 0, logp, 0.0), 0.0)


def _clean(nu):
    nu = np.asarray(nu, dtype=float)
    return np.where(nu < _TINY, 0.0, nu)


def responsibilities(nu) -> np.ndarray:
    """Column-normalize the weight matrix: r[o, i] = nu[o, i] / sum_o nu[o, i]."""
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    if np.any(nu < 0):
        raise CurriculumError("weights must be non-negative")
    tot = nu.sum(axis=0)
    if np.any(tot <= 0):
        bad = np.flatnonzero(tot <= 0)
        raise CurriculumError(f"data points {bad[:5].tolist()} carry no weight in any component")
    return nu / tot


def log_responsibilities(log_nu) -> np.ndarray:
    log_nu = np.atleast_2d(log_nu)
    return log_nu - logsumexp(log_nu, axis=0)


def weight_entropy(nu) -> float:
    """Entropy of the component-averaged weights ``mean_o nu[o, :]``."""
    nu = _clean(np.atleast_2d(nu))
    agg = nu.mean(axis=0)
    with np.errstate(divide="ignore"):
        return float(-np.sum(_xlogy_rows(agg, np.log(agg))))


def per_component_entropy(nu_row, r_row) -> float:
    """-sum_i nu_i (log nu_i - log r_i) for one component."""
    nu = _clean(np.ravel(nu_row))
    r = np.asarray(r_row, dtype=float).ravel()
    if nu.shape != r.shape:
        raise CurriculumError("weight and responsibility rows differ in length")
    if np.any((nu > 0) & (r <= 0)):
        raise CurriculumError("positive weight on a point with zero responsibility")
    with np.errstate(divide="ignore"):
        return float(-np.sum(_xlogy_rows(nu, np.log(nu) - np.log(np.where(r > 0, r, 1.0)))))


def log_row_entropy(log_nu_row, log_r_row=None) -> float:
    """Log-space version of :func:`per_component_entropy`; Shannon if ``log_r_row`` is None."""
    lv = np.asarray(log_nu_row, dtype=float)
    v = np.exp(lv)
    lr = 0.0 if log_r_row is None else np.asarray(log_r_row, dtype=float)
    terms = np.where(v > 0, v * (lv - lr), 0.0)
    return float(-np.sum(terms))


def log_update_fixed_alpha(scores, log_resp, alpha, K) -> np.ndarray:
    """log of nu[o, i] ∝ exp((K / alpha) s[o, i]) r[o, i], rows normalized."""
    if not alpha > 0:
        raise CurriculumError("alpha must be positive")
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    if not np.all(np.isfinite(scores)):
        raise CurriculumError("scores must be finite")
    z = (K / alpha) * scores + log_resp
    norm = logsumexp(z, axis=1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise CurriculumError("a component has zero weight on every data point")
    return z - norm


def update_weights_fixed_alpha(scores, resp, alpha, K) -> np.ndarray:
    resp = np.atleast_2d(np.asarray(resp, dtype=float))
    with np.errstate(divide="ignore"):
        log_r = np.log(resp)
    return _clean(np.exp(log_update_fixed_alpha(scores, log_r, alpha, K)))


@dataclass(frozen=True)
class DualSolution:
    alpha: float
    log_nu: np.ndarray
    dual_value: float
    entropy: float
    active: bool
    feasible: bool
    n_evals: int

    @property
    def nu(self) -> np.ndarray:
        return _clean(np.exp(self.log_nu))


def dual_function(alpha, scores_row, log_resp_row, h_min) -> float:
    """g(alpha) = alpha * (log sum_i exp(s_i / alpha) r_i - h_min)."""
    s = np.asarray(scores_row, dtype=float)
    m = s.max()
    return float(alpha * (logsumexp((s - m) / alpha + log_resp_row) - h_min) + m)


def _tilt(log_alpha, s, lr):
    a = np.exp(log_alpha)
    # shift by max(s) so the entropy is not a difference of huge numbers
    ds = s - s.max()
    z = ds / a + lr
    lse = logsumexp(z)
    log_nu = z - lse
    nu = np.exp(log_nu)
    ent = lse - float(np.dot(nu, ds)) / a
    return log_nu, ent, lse, a


def solve_log_alpha_dual(scores_row, log_resp_row, h_min, alpha_bounds=(ALPHA_MIN, ALPHA_MAX)):
    """Minimize the entropy dual over alpha for one component, log-space inputs.

    The derivative of the dual is ``H_r(nu(alpha)) - h_min``, which increases
    with alpha, so the minimizer is the root of the entropy gap, bracketed on
    a log scale.  When the gap is already non-negative at the lower bound the
    constraint is inactive; when it is still negative at the upper bound no
    alpha in range satisfies the constraint and the solution is flagged
    infeasible.
    """
    s = np.asarray(scores_row, dtype=float).ravel()
    lr = np.broadcast_to(np.asarray(log_resp_row, dtype=float), s.shape)
    if not np.all(np.isfinite(s)):
        raise CurriculumError("scores must be finite")
    if h_min > np.log(s.size) + 1e-12:
        raise CurriculumError(
            f"entropy budget h_min={h_min:.6g} exceeds log N={np.log(s.size):.6g}"
        )
    lo, hi = np.log(alpha_bounds[0]), np.log(alpha_bounds[1])
    evals = [0]

    def gap(x):
        evals[0] += 1
        return _tilt(x, s, lr)[1] - h_min

    def finish(x, active, feasible):
        log_nu, ent, lse, a = _tilt(x, s, lr)
        return DualSolution(
            alpha=float(a),
            log_nu=log_nu,
            dual_value=float(a * (lse - h_min) + s.max()),
            entropy=float(ent),
            active=active,
            feasible=feasible,
            n_evals=evals[0],
        )

    g_lo = gap(lo)
    if g_lo >= 0:
        return finish(lo, False, True)
    g_hi = gap(hi)
    if g_hi < 0:
        return finish(hi, True, False)
    try:
        x, info = optimize.brentq(gap, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps,
                                  maxiter=500, full_output=True)
    except (RuntimeError, ValueError) as exc:
        raise CurriculumError(
            f"dual line search failed on [{alpha_bounds[0]:g}, {alpha_bounds[1]:g}]: "
            f"gap(lo)={g_lo:.3g}, gap(hi)={g_hi:.3g}: {exc}"
        ) from None
    if not info.converged:
        raise CurriculumError(f"dual line search did not converge after {info.iterations} steps")
    # the returned root may sit a hair on the infeasible side
    step = 1e-13
    while gap(x) < 0 and x < hi:
        x = min(x + step, hi)
        step *= 4
    return finish(x, True, True)


def solve_alpha_dual(scores_row, resp_row, budget, alpha_bounds=(ALPHA_MIN, ALPHA_MAX)):
    """Auto-tuned curriculum weights for one component.

    Parameters
    ----------
    scores_row : array of shape (N,)
        Joint log scores ``log p(w|c,o) + log p(c|o) + log p(o)``.
    resp_row : array of shape (N,)
        Responsibilities of the component, used as per-point factors.
    budget : EntropyBudget or float
        Desired effective samples, or a raw ``h_min`` when a float.

    Returns
    -------
    DualSolution
        ``alpha``, the normalized weights and bookkeeping about whether the
        entropy constraint binds.
    """
    h_min = budget.h_min if isinstance(budget, EntropyBudget) else float(budget)
    r = np.asarray(resp_row, dtype=float).ravel()
    if np.any(r < 0):
        raise CurriculumError("responsibilities must be non-negative")
    with np.errstate(divide="ignore"):
        lr = np.log(r)
    if not np.any(np.isfinite(lr)):
        raise CurriculumError("responsibility row is identically zero")
    return solve_log_alpha_dual(scores_row, lr, h_min, alpha_bounds)
