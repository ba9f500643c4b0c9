import itertools

import numpy as np
import pytest
from sklearn.base import clone

from mlcur.curriculum import log_responsibilities
from mlcur.mixture import CurriculumMoE, GatingPrior
from mlcur.trainer import (
    COV_FLOOR,
    DegenerateDesignError,
    MLCurRegressor,
    TrainConfig,
    TrainingError,
    TrainTrace,
    eq7_objective,
    init_model,
    joint_scores,
    lower_bound_objective,
    m_step_context,
    m_step_expert,
    m_step_gating,
    train_ml_cur,
    train_single,
)

from synthetic import THREE_MODES, TWO_MODES, linear_data, mode_data


# M-steps

def test_expert_recovers_noiseless_map():
    rng = np.random.default_rng(0)
    A, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    C, W = linear_data(rng, 20, A, b, 0.0)
    e = m_step_expert(C, W, rng.uniform(0.1, 1, 20))
    np.testing.assert_allclose(e.A, A, atol=1e-8)
    np.testing.assert_allclose(e.b, b, atol=1e-8)
    np.testing.assert_allclose(e.Sigma, COV_FLOOR * np.eye(3), atol=1e-12)


def test_expert_point_mass_uses_ridge_fallback():
    rng = np.random.default_rng(1)
    C, W = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    w = np.zeros(6)
    w[2] = 1.0
    with pytest.raises(DegenerateDesignError, match="ridge"):
        m_step_expert(C, W, w)
    e = m_step_expert(C, W, w, fallback_ridge=1e-6)
    np.testing.assert_allclose(e.b + e.A @ C[2], W[2], atol=1e-12)
    np.testing.assert_allclose(e.Sigma, COV_FLOOR * np.eye(3), atol=1e-12)


def test_expert_hand_solved_weighted_normal_equations():
    c = np.array([0.0, 1.0, 2.0])
    y = np.array([1.0, 2.0, 4.0])
    w = np.array([1.0, 2.0, 1.0])
    # sums: Sw=4, Swc=4, Swcc=6, Swy=9, Swcy=12
    # [6 4; 4 4] [a; b] = [12; 9]  ->  a = 1.5, b = 0.75
    e = m_step_expert(c[:, None], y[:, None], w, cov_floor=0.0)
    assert e.A[0, 0] == pytest.approx(1.5, abs=1e-10)
    assert e.b[0] == pytest.approx(0.75, abs=1e-10)
    res = y - 1.5 * c - 0.75
    assert e.Sigma[0, 0] == pytest.approx(np.sum(w * res ** 2) / 4, abs=1e-10)


def test_context_step_direct_formulas():
    rng = np.random.default_rng(2)
    C = rng.normal(size=(4, 2))
    w = np.array([0.4, 0.3, 0.2, 0.1])
    ctx = m_step_context(C, w, cov_floor=0.0)
    mu = sum(w[i] * C[i] for i in range(4))
    S = sum(w[i] * np.outer(C[i] - mu, C[i] - mu) for i in range(4))
    np.testing.assert_allclose(ctx.mu, mu, atol=1e-12)
    np.testing.assert_allclose(ctx.Sigma_c, S, atol=1e-12)


def test_context_step_uniform_and_point_mass():
    rng = np.random.default_rng(3)
    C = rng.normal(size=(9, 2))
    ctx = m_step_context(C, np.ones(9), cov_floor=0.0)
    np.testing.assert_allclose(ctx.mu, C.mean(axis=0))
    np.testing.assert_allclose(ctx.Sigma_c, np.cov(C.T, bias=True), atol=1e-12)
    w = np.zeros(9)
    w[4] = 1
    ctx = m_step_context(C, w)
    np.testing.assert_allclose(ctx.mu, C[4])
    np.testing.assert_allclose(ctx.Sigma_c, COV_FLOOR * np.eye(2), atol=1e-15)


def test_gating_step():
    np.testing.assert_allclose(np.exp(m_step_gating(np.full((4, 5), 0.2)).log_lambda), 0.25)
    np.testing.assert_allclose(np.exp(m_step_gating([[1.0, 2.0], [0.5, 0.5]]).log_lambda), [0.75, 0.25])
    np.testing.assert_allclose(np.exp(m_step_gating([[0.3, 0.7]]).log_lambda), [1.0])


def test_zero_weights_rejected():
    with pytest.raises(ValueError):
        m_step_context(np.zeros((3, 1)), np.zeros(3))


# objectives

@pytest.mark.parametrize("K", [1, 2, 4])
def test_bound_is_tight_at_own_responsibilities(K):
    rng = np.random.default_rng(K)
    nu = rng.dirichlet(np.ones(12), size=K)
    s = rng.normal(0, 3, size=(K, 12))
    log_nu = np.log(nu)
    lhs = lower_bound_objective(log_nu, log_responsibilities(log_nu), s, 1.7)
    assert lhs == pytest.approx(eq7_objective(log_nu, s, 1.7), abs=1e-9)


def test_bound_is_below_objective_for_other_responsibilities():
    rng = np.random.default_rng(5)
    log_nu = np.log(rng.dirichlet(np.ones(8), size=3))
    other = log_responsibilities(np.log(rng.dirichlet(np.ones(8), size=3)))
    s = rng.normal(size=(3, 8))
    assert lower_bound_objective(log_nu, other, s, 2.0) <= eq7_objective(log_nu, s, 2.0) + 1e-12


# training runs

@pytest.fixture(scope="module")
def two_mode():
    C, W, labels = mode_data(np.random.default_rng(11), 400, TWO_MODES, [0.5, 0.5])
    return C, W, labels


def _map_error(expert, A, b):
    c = np.linspace(-1, 1, 41)[:, None]
    t = c @ A.T + b
    return np.linalg.norm(c @ expert.A.T + expert.b - t) / np.linalg.norm(t)


@pytest.mark.parametrize("alpha", [None, 5.0])
def test_objective_never_decreases(two_mode, alpha):
    C, W, _ = two_mode
    res = train_ml_cur(C, W, TrainConfig(2, n_eff=100, alpha=alpha, seed=3))
    obj = res.trace.objectives
    rel = np.diff(obj) / np.maximum(np.abs(obj[:-1]), 1.0)
    assert rel.min() >= -1e-8


def test_entropy_constraint_holds_every_iteration(two_mode):
    C, W, _ = two_mode
    n_eff = 100
    res = train_ml_cur(C, W, TrainConfig(2, n_eff=n_eff, seed=4))
    for rec in res.trace:
        active = np.where(rec.relaxed, rec.component_entropy, rec.bound_entropy)
        assert np.all(active >= np.log(n_eff) - 1e-5)
    assert np.all(res.trace.effective_samples[-1] >= n_eff - 0.5)


def test_two_modes_are_separated_not_averaged(two_mode):
    C, W, _ = two_mode
    res = train_ml_cur(C, W, TrainConfig(2, n_eff=len(C) / 4, seed=0))
    errs = np.array([[_map_error(e, A, b) for A, b in TWO_MODES] for e in res.model.experts])
    assert sorted(errs.argmin(axis=1).tolist()) == [0, 1]
    assert np.all(errs.min(axis=1) < 0.05)
    A_avg = sum(A for A, _ in TWO_MODES) / 2
    b_avg = sum(b for _, b in TWO_MODES) / 2
    for e in res.model.experts:
        c = np.linspace(-1, 1, 41)[:, None]
        dist = np.linalg.norm(c @ (e.A - A_avg).T + e.b - b_avg)
        span = np.linalg.norm(c @ (TWO_MODES[0][0] - A_avg).T + TWO_MODES[0][1] - b_avg)
        assert dist > 0.25 * span


def test_small_mode_is_ignored():
    C, W, labels = mode_data(np.random.default_rng(12), 400, THREE_MODES, [0.45, 0.45, 0.1])
    res = train_ml_cur(C, W, TrainConfig(2, seed=0))
    errs = np.array([[_map_error(e, A, b) for A, b in THREE_MODES] for e in res.model.experts])
    assert sorted(errs.argmin(axis=1).tolist()) == [0, 1]
    assert res.nu[:, labels == 2].sum() < 0.05 * 2


def test_single_component_recovers_generator():
    rng = np.random.default_rng(13)
    A, b, noise = np.array([[1.5, -0.5]]), np.array([0.3]), 0.2
    C, W = linear_data(rng, 600, A, b, noise)
    res = train_ml_cur(C, W, TrainConfig(1, seed=0))
    X = np.hstack([C, np.ones((len(C), 1))])
    # the default budget keeps N/2 effective samples, doubling the variance
    se = noise * np.sqrt(2 * np.diag(np.linalg.inv(X.T @ X)))
    assert np.all(np.abs(res.model.experts[0].A[0] - A[0]) < 3 * se[:2])


def test_permuting_initial_components_permutes_result(two_mode):
    C, W, _ = two_mode
    cfg = TrainConfig(3, n_eff=80, seed=0, max_iters=60)
    start = init_model(C, W, 3, np.random.default_rng(1))
    perm = [2, 0, 1]
    a = train_ml_cur(C, W, cfg, initial_model=start)
    b = train_ml_cur(C, W, cfg, initial_model=start.permuted(perm))
    for new, old in enumerate(perm):
        np.testing.assert_allclose(b.model.experts[new].A, a.model.experts[old].A, atol=1e-8)
        np.testing.assert_allclose(b.model.contexts[new].mu, a.model.contexts[old].mu, atol=1e-8)
    np.testing.assert_allclose(b.nu, a.nu[perm], atol=1e-10)


def test_no_data_weights_collapses_components(two_mode):
    C, W, _ = two_mode
    res = train_ml_cur(C, W, TrainConfig(3, seed=0, ablation="no-data-weights"))
    e = res.model.experts
    for i, j in itertools.combinations(range(3), 2):
        assert np.abs(e[i].A - e[j].A).max() < 1e-6
        assert np.abs(e[i].b - e[j].b).max() < 1e-6
        assert np.abs(e[i].Sigma - e[j].Sigma).max() < 1e-6


def test_locality_violation_fits_contexts_after_training(two_mode):
    C, W, _ = two_mode
    res = train_ml_cur(C, W, TrainConfig(2, n_eff=100, seed=0, ablation="locality-violation"))
    for o in range(2):
        ref = m_step_context(C, res.nu[o])
        np.testing.assert_allclose(res.model.contexts[o].mu, ref.mu)


# single expert

def test_single_expert_large_alpha_is_plain_fit():
    rng = np.random.default_rng(14)
    C, W = linear_data(rng, 80, np.array([[1.0], [-2.0]]), np.zeros(2), 0.3)
    out = train_single(C, W, TrainConfig(1, alpha=1e9, seed=0))
    ref = m_step_expert(C, W, np.ones(len(C)))
    np.testing.assert_allclose(out.nu, 1 / len(C), atol=1e-9)
    np.testing.assert_allclose(out.expert.A, ref.A, atol=1e-6)
    np.testing.assert_allclose(out.expert.b, ref.b, atol=1e-6)


def test_single_expert_objective_is_monotone():
    rng = np.random.default_rng(15)
    C, W = linear_data(rng, 100, np.array([[1.0]]), np.zeros(1), 0.3)
    out = train_single(C, W, TrainConfig(1, alpha=1.0, seed=0))
    assert np.diff(out.trace.objectives).min() >= -1e-9


def test_single_expert_ignores_gross_outliers():
    rng = np.random.default_rng(16)
    C, W = linear_data(rng, 300, np.array([[1.0], [0.5]]), np.zeros(2), 0.1)
    bad = rng.choice(300, 30, replace=False)
    W[bad] = rng.uniform(-20, 20, size=(30, 2))
    out = train_single(C, W, TrainConfig(1, alpha=1.0, seed=0))
    assert out.nu[bad].sum() < 0.01


def test_single_expert_needs_one_component():
    with pytest.raises(ValueError):
        train_single(np.zeros((4, 1)), np.zeros((4, 1)), TrainConfig(2, alpha=1.0))


def _simplex_grid(N, m):
    pts = [c for c in itertools.product(range(m + 1), repeat=N - 1) if sum(c) <= m]
    return np.array([list(c) + [m - sum(c)] for c in pts]) / m


def _entropy(P):
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=1)


_COARSE = _simplex_grid(5, 40)
_COARSE_H = _entropy(_COARSE)
_OFFSETS = [np.array(list(itertools.product(np.linspace(-h, h, 11), repeat=4))) for h in (1 / 40, 1 / 200, 1 / 1000)]


def _grid_argmax(s, alpha):
    # exhaustive simplex grid, then nested local grids around the best point
    x = _COARSE[np.argmax(_COARSE @ s + alpha * _COARSE_H)]
    for d in _OFFSETS:
        P = np.column_stack([x[:4] + d, 1 - (x[:4] + d).sum(axis=1)])
        P = P[(P >= 0).all(axis=1)]
        x = P[np.argmax(P @ s + alpha * _entropy(P))]
    return x


@pytest.mark.parametrize("seed", range(3))
def test_tiny_instance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(-1, 1, (5, 1))
    W = 2 * C + 0.3 * rng.normal(size=(5, 1))
    W[0] += 3
    alpha = 4.0
    cfg = TrainConfig(1, alpha=alpha, seed=seed, rel_tol=1e-12, max_iters=2000)
    out = train_single(C, W, cfg)
    model = init_model(C, W, 1, np.random.default_rng(seed), cfg.cov_floor, cfg.fallback_ridge)
    nu = np.zeros(5)
    for _ in range(100):
        s = joint_scores(model, C, W)[0]
        nu, prev = _grid_argmax(s, alpha), nu
        if np.abs(nu - prev).max() < 1e-12:
            break
        model = CurriculumMoE(
            [m_step_expert(C, W, nu, cfg.cov_floor, cfg.fallback_ridge)],
            [m_step_context(C, nu, cfg.cov_floor)],
            GatingPrior.uniform(1),
        )
    s = joint_scores(model, C, W)[0]
    nu = _grid_argmax(s, alpha)
    brute = nu @ s + alpha * _entropy(nu[None])[0]
    assert out.trace.objectives[-1] == pytest.approx(brute, abs=1e-3)


def test_recurring_collapse_raises():
    rng = np.random.default_rng(0)
    C = rng.uniform(-1, 1, (5, 1))
    W = 2 * C + 0.3 * rng.normal(size=(5, 1))
    with pytest.raises(TrainingError, match="collapsed"):
        train_single(C, W, TrainConfig(1, alpha=0.5, seed=0))


# config and estimator

@pytest.mark.parametrize(
    "kwargs",
    [dict(n_components=0), dict(n_eff=500.0), dict(n_eff=0.5), dict(max_iters=0),
     dict(ablation="bogus"), dict(alpha=-1.0), dict(entropy_form="renyi")],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs).validate(100)


def test_fewer_samples_than_components():
    with pytest.raises(ValueError):
        train_ml_cur(np.zeros((2, 1)), np.zeros((2, 1)), TrainConfig(3))


def test_trace_round_trip(two_mode):
    C, W, _ = two_mode
    res = train_ml_cur(C, W, TrainConfig(2, n_eff=100, seed=0, max_iters=5))
    back = TrainTrace.from_dict(res.trace.to_dict())
    assert len(back) == len(res.trace) == 5
    np.testing.assert_allclose(back.objectives, res.trace.objectives)
    np.testing.assert_allclose(back.effective_samples, res.trace.effective_samples)


def test_estimator_api(two_mode):
    C, W, _ = two_mode
    est = MLCurRegressor(n_components=2, n_eff=100, random_state=0)
    assert clone(est).get_params() == est.get_params()
    est.fit(C, W)
    assert est.predict(C[:7]).shape == (7, 2)
    assert est.sample(C[:7], random_state=0).shape == (7, 2)
    assert np.isfinite(est.score(C, W))
    np.testing.assert_allclose(est.nu_.sum(axis=1), 1.0)
    again = MLCurRegressor(n_components=2, n_eff=100, random_state=0).fit(C, W)
    np.testing.assert_array_equal(again.log_nu_, est.log_nu_)
