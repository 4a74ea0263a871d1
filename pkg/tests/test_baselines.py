import numpy as np
import pytest

from pgcorr.baselines import DirichletModel, dirichlet_posterior_mean, dirichlet_posterior_sample


def test_posterior_mean_examples():
    m = dirichlet_posterior_mean(DirichletModel(np.array([[0, 0], [3, 1]])))
    np.testing.assert_allclose(m, [[0.5, 0.5], [4 / 6, 2 / 6]], atol=1e-15)
    np.testing.assert_allclose(dirichlet_posterior_mean(DirichletModel(np.zeros((1, 4), dtype=int))), [[0.25] * 4])


def test_posterior_mean_rows_normalized_and_monotone():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 20, size=(30, 5))
    m = dirichlet_posterior_mean(DirichletModel(X))
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
    for j in range(5):
        X2 = X.copy()
        X2[:, j] += 1
        assert np.all(dirichlet_posterior_mean(DirichletModel(X2))[:, j] > m[:, j])


def test_sample_concentration_limit():
    model = DirichletModel(np.zeros((3, 2), dtype=int), alpha=1e6)
    s = dirichlet_posterior_sample(model, np.random.default_rng(1))
    assert np.all(np.abs(s - 0.5) < 0.001)


def test_sample_reproducible_and_stochastic():
    model = DirichletModel(np.array([[2, 5, 1], [0, 0, 0]]))
    a = dirichlet_posterior_sample(model, np.random.default_rng(3))
    b = dirichlet_posterior_sample(model, np.random.default_rng(3))
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_sample_mean_matches_posterior_mean():
    model = DirichletModel(np.array([[2, 5, 1], [0, 0, 0], [10, 0, 3]]))
    rng = np.random.default_rng(7)
    draws = np.mean([dirichlet_posterior_sample(model, rng) for _ in range(100_000)], axis=0)
    assert np.max(np.abs(draws - dirichlet_posterior_mean(model))) < 0.005


def test_tiny_concentration_rows_still_normalized():
    model = DirichletModel(np.zeros((50, 3), dtype=int), alpha=1e-300)
    s = dirichlet_posterior_sample(model, 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0)


def test_invalid_alpha_rejected():
    with pytest.raises(ValueError):
        DirichletModel(np.ones((1, 2), dtype=int), alpha=0.0)
    with pytest.raises(ValueError):
        DirichletModel(np.ones((1, 2), dtype=int), alpha=np.array([1.0, np.nan]))
