import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from mlcur.promp import (
    BasisConfig,
    BasisError,
    ProMPEncoder,
    Trajectory,
    build_basis,
    default_centers,
    project_trajectory,
    reconstruct,
    reconstruct_states,
)


def test_basis_rows_sum_to_one():
    cfg = BasisConfig(10)
    phi = build_basis(cfg, np.linspace(0, 1, 37))
    assert phi.shape == (37, 10)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(phi > 0)


def test_basis_far_phase_does_not_underflow():
    cfg = BasisConfig(10, bandwidth=1e-3)
    phi = build_basis(cfg, [0.5, 10.0])
    assert np.all(np.isfinite(phi))
    np.testing.assert_allclose(phi.sum(axis=1), 1.0)


def test_default_centers_are_uniform_and_cover_unit_interval():
    c = default_centers(10)
    np.testing.assert_allclose(np.diff(c), np.diff(c)[0])
    assert c[0] < 0 < 1 < c[-1]
    np.testing.assert_allclose(default_centers(3), [0, 0.5, 1])


def test_config_validation():
    with pytest.raises(BasisError):
        BasisConfig(0)
    with pytest.raises(BasisError):
        BasisConfig(3, centers=(0.0, 0.0, 1.0))
    with pytest.raises(BasisError):
        BasisConfig(3, bandwidth=-1.0)
    with pytest.raises(BasisError):
        BasisConfig(3, ridge=-1e-3)
    cfg = BasisConfig(4, ridge=0.1)
    assert BasisConfig.from_dict(cfg.to_dict()) == cfg


def test_trajectory_validation():
    with pytest.raises(BasisError):
        Trajectory(np.zeros((1, 2)))
    with pytest.raises(BasisError):
        Trajectory(np.zeros((3, 2)), times=[0.0, 0.7, 0.5])
    with pytest.raises(BasisError):
        Trajectory(np.zeros((3, 2)), times=[0.1, 0.5, 1.0])


def test_two_basis_three_points_hand_solution():
    # phases 0, 0.5, 1 with centers 0 and 1 and unit bandwidth
    cfg = BasisConfig(2, centers=(0.0, 1.0), bandwidth=1.0, ridge=0.0)
    a = 1.0 / (1.0 + np.exp(-0.5))
    Phi = np.array([[a, 1 - a], [0.5, 0.5], [1 - a, a]])
    np.testing.assert_allclose(build_basis(cfg, [0, 0.5, 1]), Phi, atol=1e-15)
    y = np.array([1.0, 2.0, 4.0])
    # normal equations solved by hand for the symmetric design
    p, q = a * a + (1 - a) ** 2 + 0.25, 2 * a * (1 - a) + 0.25
    r1 = a * 1 + 0.5 * 2 + (1 - a) * 4
    r2 = (1 - a) * 1 + 0.5 * 2 + a * 4
    det = p * p - q * q
    w = np.array([(p * r1 - q * r2) / det, (p * r2 - q * r1) / det])
    got = project_trajectory(Trajectory(y), cfg)
    np.testing.assert_allclose(got, w, atol=1e-10)


def test_exact_basis_combination_round_trips():
    cfg = BasisConfig(8, ridge=0.0)
    t = np.linspace(0, 1, 60)
    w = np.random.default_rng(0).normal(size=(3, 8))
    states = build_basis(cfg, t) @ w.T
    got = project_trajectory(Trajectory(states, t), cfg)
    np.testing.assert_allclose(got, w.ravel(), atol=1e-8)


def test_ridge_zero_with_too_few_samples_fails():
    cfg = BasisConfig(10, ridge=0.0)
    with pytest.raises(BasisError):
        project_trajectory(Trajectory(np.zeros((4, 1))), cfg)


def test_reconstruct_checks_length():
    with pytest.raises(BasisError):
        reconstruct(np.zeros(7), BasisConfig(3), np.linspace(0, 1, 5))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_batch_and_single_reconstruction_agree(n_basis, d, seed):
    cfg = BasisConfig(n_basis)
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, d * n_basis))
    t = np.linspace(0, 1, 13)
    batch = reconstruct_states(W, cfg, t)
    for i in range(4):
        np.testing.assert_allclose(batch[i], reconstruct(W[i], cfg, t).states, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_is_linear(seed):
    rng = np.random.default_rng(seed)
    cfg = BasisConfig(6)
    a, b = rng.normal(size=(2, 40, 2))
    x, y = rng.normal(size=2)
    lhs = project_trajectory(Trajectory(x * a + y * b), cfg)
    rhs = x * project_trajectory(Trajectory(a), cfg) + y * project_trajectory(Trajectory(b), cfg)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_encoder_estimator_api():
    rng = np.random.default_rng(1)
    X = [np.cumsum(rng.normal(size=(30, 2)), axis=0) for _ in range(5)]
    enc = ProMPEncoder(n_basis=7)
    W = enc.fit(X).transform(X)
    assert W.shape == (5, 14)
    assert enc.n_state_dims_ == 2
    back = enc.inverse_transform(W, np.linspace(0, 1, 30))
    assert back.shape == (5, 30, 2)
    assert clone(enc).get_params() == enc.get_params()
