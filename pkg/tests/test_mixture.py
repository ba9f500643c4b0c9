import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from mlcur.mixture import (
    ContextComponent,
    CurriculumMoE,
    GatingPrior,
    LinearGaussianExpert,
    ModelError,
    context_log_density,
    expert_log_density,
    floor_covariance,
    gating_posterior,
    marginal_log_likelihood,
    predict_mean,
    sample,
)


def _random_model(rng, K=3, dc=2, dw=3):
    experts, contexts = [], []
    for _ in range(K):
        M = rng.normal(size=(dw, dw))
        experts.append(LinearGaussianExpert(rng.normal(size=(dw, dc)), rng.normal(size=dw), M @ M.T + 0.5 * np.eye(dw)))
        N = rng.normal(size=(dc, dc))
        contexts.append(ContextComponent(rng.normal(size=dc), N @ N.T + 0.5 * np.eye(dc)))
    return CurriculumMoE(experts, contexts, GatingPrior.from_unnormalized(rng.normal(size=K)))


def test_expert_density_matches_scipy():
    rng = np.random.default_rng(0)
    e = _random_model(rng).experts[0]
    c, w = rng.normal(size=2), rng.normal(size=3)
    ref = multivariate_normal(e.A @ c + e.b, e.Sigma).logpdf(w)
    assert expert_log_density(e, w, c) == pytest.approx(ref, abs=1e-10)


def test_context_density_matches_scipy():
    rng = np.random.default_rng(1)
    ctx = _random_model(rng).contexts[1]
    c = rng.normal(size=2)
    ref = multivariate_normal(ctx.mu, ctx.Sigma_c).logpdf(c)
    assert context_log_density(ctx, c) == pytest.approx(ref, abs=1e-10)


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(2)
    m = _random_model(rng)
    with pytest.raises(ModelError):
        expert_log_density(m.experts[0], np.zeros(2), np.zeros(2))
    with pytest.raises(ModelError):
        gating_posterior(m, np.zeros(3))


def test_inconsistent_model_rejected():
    rng = np.random.default_rng(3)
    m = _random_model(rng)
    with pytest.raises(ModelError):
        CurriculumMoE(m.experts[:2], m.contexts, m.gating)
    with pytest.raises(ModelError):
        GatingPrior(np.log([0.5, 0.6]))


def test_gating_posterior_sums_to_one_and_uniform_case():
    rng = np.random.default_rng(4)
    m = _random_model(rng)
    post = gating_posterior(m, rng.normal(size=(20, 2)))
    np.testing.assert_allclose(post.sum(axis=0), 1.0)
    ctx = ContextComponent(np.zeros(2), np.eye(2))
    same = CurriculumMoE(m.experts, [ctx] * 3, GatingPrior.uniform(3))
    np.testing.assert_allclose(gating_posterior(same, np.array([0.3, -2.0])), 1 / 3)


def test_gating_posterior_survives_far_contexts():
    rng = np.random.default_rng(5)
    m = _random_model(rng)
    post = gating_posterior(m, np.array([1e4, -1e4]))
    assert np.all(np.isfinite(post))
    assert post.sum() == pytest.approx(1.0)


def test_marginal_likelihood_matches_direct_sum():
    rng = np.random.default_rng(6)
    m = _random_model(rng)
    C, W = rng.normal(size=(7, 2)), rng.normal(size=(7, 3))
    total = 0.0
    for c, w in zip(C, W):
        g = np.array([m.gating.log_lambda[o] + context_log_density(m.contexts[o], c) for o in range(3)])
        g = np.exp(g - g.max())
        g /= g.sum()
        total += np.log(sum(g[o] * np.exp(expert_log_density(m.experts[o], w, c)) for o in range(3)))
    assert marginal_log_likelihood(m, C, W) == pytest.approx(total, rel=1e-10)


def test_predict_mean_uses_most_probable_component():
    rng = np.random.default_rng(7)
    m = _random_model(rng)
    C = rng.normal(size=(10, 2))
    pred = predict_mean(m, C)
    best = gating_posterior(m, C).argmax(axis=0)
    for i in range(10):
        np.testing.assert_allclose(pred[i], m.experts[best[i]].mean(C[i])[0])
    np.testing.assert_allclose(predict_mean(m, C[0]), pred[0])


def test_sample_is_deterministic_given_seed():
    rng = np.random.default_rng(8)
    m = _random_model(rng)
    C = rng.normal(size=(5, 2))
    a = sample(m, C, np.random.default_rng(3))
    b = sample(m, C, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_permuted_model_gives_same_likelihood():
    rng = np.random.default_rng(9)
    m = _random_model(rng)
    C, W = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    assert marginal_log_likelihood(m.permuted([2, 0, 1]), C, W) == pytest.approx(marginal_log_likelihood(m, C, W))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-8, 1e-1))
def test_floor_covariance_is_psd_with_floor(seed, floor):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, 2))
    S = floor_covariance(v @ v.T, floor)
    np.testing.assert_allclose(S, S.T)
    # reconstruction from clipped eigenvalues is exact up to roundoff in ||S||
    assert np.linalg.eigvalsh(S).min() >= floor - 1e-13 * max(1.0, np.abs(S).max())
