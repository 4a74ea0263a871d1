import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit, gammaln

from pgcorr.errors import NumericalError
from pgcorr.kernels import KernelSpec
from pgcorr.pgvi import (
    CountMatrix,
    HyperParams,
    VariationalPosterior,
    compute_stick_stats,
    elbo,
    elbo_grad_theta,
    expected_probs,
    fit,
    inverse_stick_breaking,
    m_step_mu,
    m_step_theta_scale,
    pg_mean,
    posterior_mean_probs,
    posterior_sample_probs,
    prior_posterior,
    stick_breaking_transform,
    uniform_prior_mean,
    update_factor,
    update_omega,
)


def line_kernel(C, theta=1.0, lengthscale=1.0):
    x = np.arange(C, dtype=float)
    return KernelSpec(np.abs(x[:, None] - x[None, :]), theta, lengthscale)


def hyper_for(C, K, theta=1.0, lengthscale=1.0, mu=None):
    mu = np.zeros((C, K - 1)) if mu is None else mu
    return HyperParams(mu, line_kernel(C, theta, lengthscale))


# --- stick-breaking -------------------------------------------------------


def test_stick_breaking_zeros():
    np.testing.assert_allclose(stick_breaking_transform([0.0, 0.0]), [0.5, 0.25, 0.25], atol=1e-15)
    np.testing.assert_allclose(stick_breaking_transform([0.0]), [0.5, 0.5], atol=1e-15)


def test_stick_breaking_against_high_precision_values():
    # evaluated separately with 30-digit arithmetic
    expected = [0.88079707797788244406, 0.032058603280084988451, 0.087144318742032567489]
    np.testing.assert_allclose(stick_breaking_transform([2.0, -1.0]), expected, rtol=0, atol=1e-12)


def test_stick_breaking_rejects_nonfinite():
    with pytest.raises(ValueError):
        stick_breaking_transform([np.nan, 0.0])
    with pytest.raises(ValueError):
        stick_breaking_transform([np.inf])


def test_stick_breaking_extreme_inputs_stay_normalized():
    p = stick_breaking_transform([800.0, -800.0, 40.0])
    assert np.isclose(p.sum(), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_inverse_stick_breaking_round_trip():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(20, 6))
    np.testing.assert_allclose(inverse_stick_breaking(stick_breaking_transform(z)), z, atol=1e-9)


def test_uniform_prior_mean_maps_to_uniform():
    np.testing.assert_allclose(stick_breaking_transform(uniform_prior_mean(3, 7)), np.full((3, 7), 1 / 7), atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_stick_breaking_is_a_distribution(z):
    p = stick_breaking_transform(z)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all((p >= 0) & (p <= 1))


def test_stick_breaking_many_random_vectors():
    z = np.random.default_rng(0).normal(scale=5, size=(10_000, 4))
    p = stick_breaking_transform(z)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12
    assert p.min() >= 0 and p.max() <= 1


# --- stick statistics -------------------------------------------------------


@pytest.mark.parametrize(
    "row, b, kappa",
    [([2, 1, 3], [6, 4], [-1, -1]), ([0, 0], [0], [0]), ([5, 0, 0], [5, 0], [2.5, 0])],
)
def test_stick_stats_examples(row, b, kappa):
    s = compute_stick_stats(np.array([row]))
    np.testing.assert_array_equal(s.b[0], b)
    np.testing.assert_array_equal(s.kappa[0], kappa)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 30), min_size=4, max_size=4), min_size=1, max_size=5))
def test_stick_stats_invariants(rows):
    X = np.array(rows)
    s = compute_stick_stats(X)
    np.testing.assert_array_equal(s.b[:, 0], X.sum(axis=1))
    assert np.all(np.diff(s.b, axis=1) <= 0)
    assert np.all(np.abs(s.kappa) <= s.b / 2 + 1e-12)
    np.testing.assert_array_equal(s.x, X[:, :-1])


def test_count_matrix_validation():
    with pytest.raises(ValueError):
        CountMatrix(np.array([[1, -1]]))
    with pytest.raises(ValueError):
        CountMatrix(np.array([[1.5, 1]]))
    with pytest.raises(ValueError):
        CountMatrix(np.array([[3]]))
    X = CountMatrix(np.array([[1, 2], [0, 4]]))
    np.testing.assert_array_equal(X.row_totals, [3, 4])


# --- Polya-Gamma moments ---------------------------------------------------


def test_pg_mean_examples():
    assert pg_mean(1, 0) == 0.25
    assert pg_mean(0, 3.7) == 0.0
    assert abs(pg_mean(2, 2) - 0.38079707797788244406) < 1e-15


def test_pg_mean_continuous_at_zero():
    for b in (0.5, 1.0, 7.0):
        assert abs(pg_mean(b, 1e-8) - b / 4) < 1e-10
    # both sides of the series threshold agree
    assert abs(pg_mean(3.0, 0.99999e-4) - pg_mean(3.0, 1.00001e-4)) < 1e-12


def test_pg_mean_rejects_negative():
    with pytest.raises(ValueError):
        pg_mean(-1, 1)
    with pytest.raises(ValueError):
        pg_mean(1, -1)


# --- factor and omega updates ----------------------------------------------


def test_update_factor_scalar_case():
    sigma2, mu = 2.0, 0.3
    X = np.array([[3, 1]])
    stats = compute_stick_stats(X)
    hyper = HyperParams(np.array([[mu]]), KernelSpec(np.zeros((1, 1)), sigma2, 1.0))
    post = prior_posterior(stats, hyper)
    post.w = np.array([[1.3]])
    omega = pg_mean(4, 1.3)
    lam, V = update_factor(0, stats, hyper, post)
    V_ref = 1 / (1 / sigma2 + omega)
    assert np.isclose(V[0, 0], V_ref, rtol=1e-12)
    assert np.isclose(lam[0], V_ref * (stats.kappa[0, 0] + mu / sigma2), rtol=1e-12)


def test_update_factor_without_data_returns_prior():
    stats = compute_stick_stats(np.zeros((4, 3), dtype=int))
    hyper = hyper_for(4, 3, theta=1.5, mu=np.arange(8.0).reshape(4, 2))
    post = prior_posterior(stats, hyper)
    for k in range(2):
        lam, V = update_factor(k, stats, hyper, post)
        np.testing.assert_allclose(lam, hyper.mu[:, k], atol=1e-12)
        np.testing.assert_allclose(V, hyper.sigma, atol=1e-12)


def test_update_factor_matches_direct_inversion():
    # Sigma = I, C = 2; the precision-form formula solved with a plain inverse
    stats = compute_stick_stats(np.array([[3, 1, 2], [0, 4, 1]]))
    hyper = HyperParams(np.array([[0.2, -0.1], [0.5, 0.0]]), KernelSpec(np.array([[0.0, 50.0], [50.0, 0.0]]), 1.0, 1.0))
    post = prior_posterior(stats, hyper)
    post.w = np.array([[0.7, 1.1], [0.4, 2.0]])
    for k in range(2):
        lam, V = update_factor(k, stats, hyper, post)
        Eo = pg_mean(stats.b[:, k], post.w[:, k])
        S = hyper.sigma
        Sinv = np.linalg.inv(S)
        V_ref = np.linalg.inv(Sinv + np.diag(Eo))
        lam_ref = V_ref @ (stats.kappa[:, k] + Sinv @ hyper.mu[:, k])
        np.testing.assert_allclose(V, V_ref, atol=1e-12)
        np.testing.assert_allclose(lam, lam_ref, atol=1e-12)


def test_update_factor_correlated_prior_matches_precision_form():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 6, size=(6, 4))
    stats = compute_stick_stats(X)
    hyper = hyper_for(6, 4, theta=2.0, lengthscale=1.5, mu=rng.normal(size=(6, 3)))
    post = prior_posterior(stats, hyper)
    post.w = rng.uniform(0.1, 3, size=post.w.shape)
    for k in range(3):
        lam, V = update_factor(k, stats, hyper, post)
        Sinv = np.linalg.inv(hyper.sigma)
        V_ref = np.linalg.inv(Sinv + np.diag(pg_mean(stats.b[:, k], post.w[:, k])))
        np.testing.assert_allclose(V, V_ref, atol=1e-9)
        np.testing.assert_allclose(lam, V_ref @ (stats.kappa[:, k] + Sinv @ hyper.mu[:, k]), atol=1e-9)


def test_update_omega_examples():
    stats = compute_stick_stats(np.array([[1, 1]]))
    post = VariationalPosterior(np.array([[0.0]]), np.array([[[1.0]]]), np.zeros((1, 1)), stats)
    assert update_omega(post)[0, 0] == 1.0
    post = VariationalPosterior(np.array([[3.0]]), np.array([[[0.25]]]), np.zeros((1, 1)), stats)
    assert update_omega(post)[0, 0] == np.sqrt(9.25)


def test_update_omega_elementwise():
    rng = np.random.default_rng(5)
    C, Km1 = 3, 3
    A = rng.normal(size=(Km1, C, C))
    V = A @ A.transpose(0, 2, 1) + np.eye(C)
    lam = rng.normal(size=(C, Km1))
    post = VariationalPosterior(lam, V, np.zeros((C, Km1)), compute_stick_stats(np.ones((C, Km1 + 1), dtype=int)))
    w = update_omega(post)
    for c in range(C):
        for k in range(Km1):
            assert np.isclose(w[c, k], np.sqrt(V[k, c, c] + lam[c, k] ** 2), rtol=1e-14)


# --- ELBO ------------------------------------------------------------------


def test_elbo_zero_at_prior_without_data():
    stats = compute_stick_stats(np.zeros((3, 4), dtype=int))
    hyper = hyper_for(3, 4, theta=0.7, mu=np.ones((3, 3)))
    post = prior_posterior(stats, hyper)
    assert abs(elbo(stats, hyper, post)) < 1e-10


def test_elbo_negative_away_from_prior_without_data():
    stats = compute_stick_stats(np.zeros((3, 3), dtype=int))
    hyper = hyper_for(3, 3)
    post = prior_posterior(stats, hyper)
    post.lam = post.lam + 0.5
    assert elbo(stats, hyper, post) < 0


def _log_evidence_and_mean(x, mu, s2):
    N = sum(x)
    logc = gammaln(N + 1) - gammaln(x[0] + 1) - gammaln(x[1] + 1)
    sd = np.sqrt(s2)

    def lik(psi):
        return np.exp(logc + x[0] * np.log(expit(psi)) + x[1] * np.log(expit(-psi)))

    def dens(psi):
        return np.exp(-0.5 * (psi - mu) ** 2 / s2) / np.sqrt(2 * np.pi * s2)

    lo, hi = mu - 12 * sd, mu + 12 * sd
    Z = quad(lambda p: lik(p) * dens(p), lo, hi, epsabs=1e-14, limit=200)[0]
    m = quad(lambda p: expit(p) * lik(p) * dens(p), lo, hi, epsabs=1e-14, limit=200)[0] / Z
    return np.log(Z), m


def test_elbo_below_log_evidence_single_observation():
    X = np.array([[1, 0]])
    hyper = HyperParams(np.zeros((1, 1)), KernelSpec(np.zeros((1, 1)), 1.0, 1.0))
    res = fit(X, hyper, tol=1e-12, max_sweeps=2000)
    logZ, _ = _log_evidence_and_mean([1, 0], 0.0, 1.0)
    assert res.elbo_trace[-1] <= logZ + 1e-6


def test_fit_matches_quadrature_posterior_mean():
    X = np.array([[80, 20]])
    hyper = HyperParams(np.zeros((1, 1)), KernelSpec(np.zeros((1, 1)), 100.0, 1.0))
    res = fit(X, hyper, tol=1e-12, max_sweeps=5000)
    logZ, m = _log_evidence_and_mean([80, 20], 0.0, 100.0)
    p = expected_probs(res.posterior)[0, 0]
    assert abs(p - 0.8) < 0.03
    assert abs(p - m) < 0.03
    assert res.elbo_trace[-1] <= logZ + 1e-6


# --- EM steps -----------------------------------------------------------------


def test_m_step_mu_copies_lambda():
    rng = np.random.default_rng(0)
    stats = compute_stick_stats(rng.integers(0, 4, size=(3, 3)))
    hyper = hyper_for(3, 3)
    post = prior_posterior(stats, hyper)
    post.lam = rng.normal(size=post.lam.shape)
    mu = m_step_mu(post)
    assert np.array_equal(mu, post.lam)
    post.lam[:] = 0.0
    assert not np.shares_memory(mu, post.lam)


def test_m_step_theta_published_divisor_example():
    # identity base, C = 2, K = 2, V = I, mu = lambda: tr(I) / (K C) = 0.5
    D = np.array([[0.0, 1e3], [1e3, 0.0]])
    stats = compute_stick_stats(np.zeros((2, 2), dtype=int))
    hyper = HyperParams(np.zeros((2, 1)), KernelSpec(D, 1.0, 1.0))
    post = VariationalPosterior(np.zeros((2, 1)), np.eye(2)[None], np.zeros((2, 1)), stats)
    assert np.isclose(m_step_theta_scale(post, hyper, divisor="KC"), 0.5, atol=1e-12)
    assert np.isclose(m_step_theta_scale(post, hyper), 1.0, atol=1e-12)


def test_m_step_theta_at_prior_matching_posterior():
    K, C = 4, 3
    stats = compute_stick_stats(np.zeros((C, K), dtype=int))
    hyper = hyper_for(C, K, theta=1.0, lengthscale=1.2)
    post = prior_posterior(stats, hyper)
    assert np.isclose(m_step_theta_scale(post, hyper, divisor="KC"), (K - 1) / K, rtol=1e-9)
    assert np.isclose(m_step_theta_scale(post, hyper), 1.0, rtol=1e-9)


def test_m_step_theta_rejects_unknown_divisor():
    stats = compute_stick_stats(np.zeros((2, 2), dtype=int))
    hyper = hyper_for(2, 2)
    with pytest.raises(ValueError):
        m_step_theta_scale(prior_posterior(stats, hyper), hyper, divisor="S")


def _random_instance(seed, C=5, K=4):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 15, size=(C, K))
    hyper = hyper_for(C, K, theta=rng.uniform(0.5, 2), lengthscale=rng.uniform(0.7, 2.5), mu=rng.normal(size=(C, K - 1)))
    res = fit(X, hyper, max_sweeps=5, tol=None)
    return compute_stick_stats(X), hyper, res.posterior


def _elbo_at(stats, hyper, post, theta=None, lengthscale=None):
    k = hyper.kernel
    kern = KernelSpec(k.distance, theta or k.theta, lengthscale or k.lengthscale)
    return elbo(stats, HyperParams(hyper.mu, kern), post)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    stats, hyper, post = _random_instance(seed)
    h = 1e-5
    th, l = hyper.kernel.theta, hyper.kernel.lengthscale
    fd_t = (_elbo_at(stats, hyper, post, theta=th + h) - _elbo_at(stats, hyper, post, theta=th - h)) / (2 * h)
    fd_l = (_elbo_at(stats, hyper, post, lengthscale=l + h) - _elbo_at(stats, hyper, post, lengthscale=l - h)) / (2 * h)
    assert abs(elbo_grad_theta(post, hyper, "theta") - fd_t) <= 1e-4 * max(abs(fd_t), 1e-8)
    assert abs(elbo_grad_theta(post, hyper, "lengthscale") - fd_l) <= 1e-4 * max(abs(fd_l), 1e-8)


def test_gradient_vanishes_at_prior_matching_posterior():
    stats = compute_stick_stats(np.zeros((4, 3), dtype=int))
    hyper = hyper_for(4, 3, theta=1.3, lengthscale=1.1)
    post = prior_posterior(stats, hyper)
    assert abs(elbo_grad_theta(post, hyper, "theta")) < 1e-9
    assert abs(elbo_grad_theta(post, hyper, "lengthscale")) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_theta_zeroes_gradient(seed):
    stats, hyper, post = _random_instance(seed)
    opt = HyperParams(hyper.mu, hyper.kernel.with_theta(m_step_theta_scale(post, hyper)))
    assert abs(elbo_grad_theta(post, opt, "theta")) < 1e-6


def test_gradient_rejects_unknown_parameter():
    stats, hyper, post = _random_instance(0)
    with pytest.raises(ValueError):
        elbo_grad_theta(post, hyper, "nu")


# --- fit -------------------------------------------------------------------


def test_fit_zero_data_returns_prior():
    hyper = hyper_for(4, 3, theta=0.8, mu=np.full((4, 2), -0.4))
    res = fit(np.zeros((4, 3), dtype=int), hyper)
    assert res.converged and res.n_sweeps == 1
    np.testing.assert_allclose(res.posterior.lam, hyper.mu, atol=1e-10)
    for Vk in res.posterior.V:
        np.testing.assert_allclose(Vk, hyper.sigma, atol=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_fit_elbo_nondecreasing_with_em(seed):
    rng = np.random.default_rng(seed)
    C, K = rng.integers(1, 12), rng.integers(2, 6)
    X = rng.integers(0, 40, size=(C, K))
    hyper = hyper_for(C, K, theta=rng.uniform(0.3, 3), lengthscale=rng.uniform(0.5, 3))
    res = fit(X, hyper, max_sweeps=40, tol=1e-12, em=True, optimize_lengthscale=True)
    tr = np.array(res.elbo_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))


def test_fit_warm_start_shape_check():
    hyper = hyper_for(3, 3)
    res = fit(np.ones((3, 3), dtype=int), hyper, max_sweeps=3)
    with pytest.raises(ValueError):
        fit(np.ones((3, 4), dtype=int), hyper_for(3, 4), init=res.posterior)


def test_fit_fixed_sweeps_mode():
    res = fit(np.ones((3, 3), dtype=int), hyper_for(3, 3), max_sweeps=4, tol=None)
    assert res.n_sweeps == 4 and res.elbo_trace == []


def test_more_data_shrinks_posterior_covariance():
    rng = np.random.default_rng(11)
    shrunk = 0
    trials = 40
    for _ in range(trials):
        X = rng.integers(0, 5, size=(4, 3))
        X2 = X + rng.integers(0, 5, size=X.shape)
        h = hyper_for(4, 3, lengthscale=1.5)
        V1 = fit(X, h, tol=1e-10).posterior.V
        V2 = fit(X2, h, tol=1e-10).posterior.V
        shrunk += all(np.trace(V2[k]) <= np.trace(V1[k]) + 1e-12 for k in range(2))
    assert shrunk >= 0.95 * trials


def test_mu_shape_validated():
    with pytest.raises(ValueError):
        HyperParams(np.zeros((2, 2)), line_kernel(3))


# --- prediction --------------------------------------------------------------


def _point_mass_posterior(C=2, K=3):
    stats = compute_stick_stats(np.zeros((C, K), dtype=int))
    V = np.repeat((1e-14 * np.eye(C))[None], K - 1, axis=0)
    return VariationalPosterior(np.zeros((C, K - 1)), V, np.zeros((C, K - 1)), stats)


def test_posterior_mean_probs_degenerate():
    p = posterior_mean_probs(_point_mass_posterior(), n_samples=50, rng=0)
    np.testing.assert_allclose(p, [[0.5, 0.25, 0.25]] * 2, atol=1e-6)


def test_single_sample_equals_transform_of_draw():
    stats, hyper, post = _random_instance(2)
    p = posterior_mean_probs(post, n_samples=1, rng=42)
    from pgcorr.pgvi import sample_psi

    np.testing.assert_allclose(p, stick_breaking_transform(sample_psi(post, 42, 1)[0]), atol=1e-15)


def test_posterior_mean_probs_matches_quadrature():
    X = np.array([[7, 3]])
    hyper = HyperParams(np.zeros((1, 1)), KernelSpec(np.zeros((1, 1)), 2.0, 1.0))
    post = fit(X, hyper, tol=1e-12).posterior
    s2 = post.V[0, 0, 0]
    m = quad(lambda p: expit(p) * np.exp(-0.5 * (p - post.lam[0, 0]) ** 2 / s2) / np.sqrt(2 * np.pi * s2), -40, 40)[0]
    assert abs(posterior_mean_probs(post, 10_000, rng=0)[0, 0] - m) < 0.01
    assert abs(expected_probs(post)[0, 0] - m) < 1e-8


def test_posterior_sample_reproducible_and_consistent():
    stats, hyper, post = _random_instance(4, C=3, K=3)
    a = posterior_sample_probs(post, np.random.default_rng(9))
    b = posterior_sample_probs(post, np.random.default_rng(9))
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    mc = posterior_mean_probs(post, 100_000, rng=1)
    np.testing.assert_allclose(mc, expected_probs(post), atol=0.01)


def test_posterior_sample_degenerate_is_plugin():
    post = _point_mass_posterior()
    np.testing.assert_allclose(posterior_sample_probs(post, 0), stick_breaking_transform(post.lam), atol=1e-6)


def test_posterior_mean_probs_requires_samples():
    with pytest.raises(ValueError):
        posterior_mean_probs(_point_mass_posterior(), n_samples=0)


def test_non_pd_covariance_raises():
    stats = compute_stick_stats(np.ones((2, 2), dtype=int))
    hyper = hyper_for(2, 2)
    post = VariationalPosterior(np.zeros((2, 1)), np.array([[[1.0, 2.0], [2.0, 1.0]]]), np.ones((2, 1)), stats)
    with pytest.raises(NumericalError):
        elbo(stats, hyper, post)
