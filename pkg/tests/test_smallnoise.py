import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from nuisance_oed import DataSet, ExperimentSpec, GaussianPrior, NotPD, RngStream, models, simulate_data
from nuisance_oed.smallnoise import (PD_TOLERANCE, check_small_noise_applicability, correction_batch,
                                     correction_term, corrected_likelihood, log_likelihood_tilde, loglik_exact_batch,
                                     loglik_tilde_batch, sample_data_tilde, scaled_jacobian)

A_E = np.array([12.0, 25.0, 48.0])  # A @ (1, 1) for the three-output toy


def scalar_spec(noise_var, nuisance_var, n_exp=1):
    return ExperimentSpec(n_exp, [[noise_var]], [[nuisance_var]], GaussianPrior([1.0], [[0.04]]))


# --------------------------------------------------------------- scaled jacobian

def test_scaled_jacobian_example1(ex1):
    s2 = 1e-8
    M = scaled_jacobian(ex1, [1.0, 1.0], s2 * np.eye(2))
    assert np.allclose(M, np.sqrt(s2) * np.column_stack([A_E, A_E]), rtol=1e-12)


def test_scaled_jacobian_identity_and_vanishing(ex1):
    theta = np.array([0.7, 1.4])
    assert np.array_equal(scaled_jacobian(ex1, theta, np.eye(2)), ex1.jac_phi0(theta))
    d = 1e-10
    assert np.allclose(scaled_jacobian(ex1, theta, d * np.eye(2)), np.sqrt(d) * ex1.jac_phi0(theta), rtol=1e-12)


# --------------------------------------------------------------- correction term

def test_correction_vanishing_nuisance(ex1):
    ct = correction_term(ex1, [1.0, 1.0], models.example1_spec(nuisance_var=1e-16))
    assert ct.is_pd and ct.min_eigenvalue >= 1 - 1e-6


@pytest.mark.parametrize("s2", [1e-9, 1.0e-8, 1.6e-8, 1.65e-8, 3e-8])
def test_correction_rank_one_eigenvalue(ex1, s2):
    # rank-one update: the small eigenvalue is 1 - 2 (s2 / noise_var) |A e|^2
    ct = correction_term(ex1, [1.0, 1.0], models.example1_spec(nuisance_var=s2))
    expected = 1.0 - (s2 / 1e-4) * 2 * (A_E @ A_E)
    assert ct.min_eigenvalue == pytest.approx(expected, abs=1e-12)
    assert ct.is_pd == (expected > PD_TOLERANCE)


def test_correction_crosses_zero_at_hand_threshold(ex1):
    thr = 1e-4 / (2 * A_E @ A_E)
    assert thr == pytest.approx(1.627e-8, rel=1e-3)
    assert correction_term(ex1, [1, 1], models.example1_spec(nuisance_var=0.999 * thr)).is_pd
    assert not correction_term(ex1, [1, 1], models.example1_spec(nuisance_var=1.001 * thr)).is_pd


def test_prior_level_threshold_near_reported_value(ex1):
    # over prior draws the first failure sits below the value at the prior mean
    thetas = models.example1_spec().prior.sample(RngStream(0).generator(), 10_000)
    worst = np.max(np.sum((thetas @ models.A_EXAMPLE1.T) ** 2, axis=1))
    thr = 1e-4 / (2 * worst)
    assert 0.7e-8 <= thr <= 2.9e-8


@given(st.floats(1e-10, 1e-6), st.floats(1.0, 100.0), st.integers(0, 10_000))
def test_correction_properties(s2, factor, seed, ):
    model = models.make_example1()
    spec = models.example1_spec(nuisance_var=s2)
    theta = 1.0 + 0.1 * np.random.default_rng(seed).standard_normal(2)
    C, eig = correction_batch(model, theta[None], spec)
    assert np.abs(C[0] - C[0].T).max() <= 1e-12
    assert eig.max() <= 1 + 1e-12
    _, eig_big = correction_batch(model, theta[None], models.example1_spec(nuisance_var=s2 * factor))
    assert np.all(eig_big <= eig + 1e-12)
    # once the gate fails it stays failed for larger nuisance variance
    if eig[0, 0] <= PD_TOLERANCE:
        assert eig_big[0, 0] <= PD_TOLERANCE


def test_corrected_likelihood_inverse_pair(ex1):
    cl = corrected_likelihood(ex1, [1.0, 1.0], models.example1_spec(nuisance_var=1e-8))
    assert np.allclose(cl.updated_precision @ cl.updated_cov, np.eye(3), atol=1e-8)
    assert np.all(np.linalg.eigvalsh(cl.updated_cov) > 0)
    with pytest.raises(NotPD):
        corrected_likelihood(ex1, [1.0, 1.0], models.example1_spec(nuisance_var=1e-7))


# ------------------------------------------------------------------ applicability

def test_applicability_without_nuisance(ex1):
    rep = check_small_noise_applicability(ex1, models.example1_spec(), 100, RngStream(0), nuisance_var=0.0)
    assert rep.applicable and rep.margin == pytest.approx(1e-4)


def test_applicability_matches_eigen_scan(ex1):
    spec = models.example1_spec(nuisance_var=1e-9)
    rep = check_small_noise_applicability(ex1, spec, 10_000, RngStream(1))
    thetas = spec.prior.sample(RngStream(1).generator(), 10_000)
    _, eig = correction_batch(ex1, thetas, spec)
    assert rep.applicable and np.all(eig[:, 0] > 0)
    # scalar bound and eigen-scan agree on the worst case: lambda_min = 1 - worst / noise_var
    assert 1 - rep.worst / 1e-4 == pytest.approx(eig[:, 0].min(), abs=1e-12)


def test_applicability_fails_above_threshold(ex1):
    rep = check_small_noise_applicability(ex1, models.example1_spec(nuisance_var=1e-7), 1000, RngStream(2))
    assert not rep.applicable and rep.margin < 0


def test_eit_nuisance_gradient_order_ten():
    model = models.make_eit((2.0, 2.0), 1.0)
    spec = models.eit_spec((2.0, 2.0))
    thetas = spec.prior.sample(RngStream(3).generator(), 3)
    norms = np.linalg.norm(model.jac_phi0_batch(thetas), ord=2, axis=(1, 2))
    assert np.all((norms > 1.0) & (norms < 100.0))
    # so sigma_phi of order 1e-3 is where the scalar bound starts to bite
    assert 1e-4 < np.sqrt(1e-4) / norms.max() < 1e-2


# ----------------------------------------------------------------- likelihood

def test_tilde_reduces_to_plain_likelihood(ex1):
    spec = models.example1_spec(nuisance_var=1e-30, n_exp=3)
    data = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(5))
    ybar, S = data.whitened_stats(spec)
    theta = np.array([1.01, 0.99])
    plain = loglik_exact_batch(ex1, theta[None], np.zeros((1, 2)), ybar, S, spec)[0]
    assert log_likelihood_tilde(ex1, theta, data, spec) == pytest.approx(plain, abs=1e-10)
    direct = sum(stats.multivariate_normal(ex1.eval(theta, [0, 0]), spec.noise_cov).logpdf(y)
                 for y in data.observations.T)
    assert plain == pytest.approx(direct, abs=1e-8)


def test_tilde_against_marginal_quadrature(scalar_exp):
    noise_var = 1e-2
    nuis_var = 1e-6 * noise_var
    spec = scalar_spec(noise_var, nuis_var)
    theta = 1.3
    sphi = np.sqrt(nuis_var)
    for y in (1.3, 1.2, 1.45):
        def integrand(phi):
            return (stats.norm.pdf(y, theta * np.exp(phi), np.sqrt(noise_var)) * stats.norm.pdf(phi, 0, sphi))
        exact, _ = integrate.quad(integrand, -12 * sphi, 12 * sphi, epsabs=0, epsrel=1e-12, limit=200)
        approx = np.exp(log_likelihood_tilde(scalar_exp, [theta], DataSet(np.array([[y]])), spec))
        assert abs(approx - exact) / exact <= 1e-4


def test_tilde_zero_residuals_is_normalisation(ex1):
    spec = models.example1_spec(nuisance_var=1e-8, n_exp=4)
    theta = np.array([1.0, 1.0])
    g = ex1.eval(theta, [0, 0])
    data = DataSet(np.tile(g[:, None], (1, 4)))
    cl = corrected_likelihood(ex1, theta, spec)
    expected = -2.0 * np.linalg.slogdet(2 * np.pi * cl.updated_cov)[1]
    assert log_likelihood_tilde(ex1, theta, data, spec) == pytest.approx(expected, abs=1e-8)


def test_tilde_is_gaussian_in_data(ex1):
    # second differences along any data direction are constant
    spec = models.example1_spec(nuisance_var=1e-8)
    theta = np.array([1.0, 1.0])
    y0 = ex1.eval(theta, [0, 0])
    direction = np.array([0.3, -0.2, 0.5]) * 1e-2
    vals = [log_likelihood_tilde(ex1, theta, DataSet(y0 + k * direction), spec) for k in range(-3, 4)]
    second = np.diff(vals, 2)
    assert np.allclose(second, second[0], rtol=1e-7, atol=1e-9)
    prec = corrected_likelihood(ex1, theta, spec).updated_precision
    assert second[0] == pytest.approx(-direction @ prec @ direction, rel=1e-7)


def test_tilde_raises_not_pd(ex1):
    spec = models.example1_spec(nuisance_var=1e-7)
    with pytest.raises(NotPD) as info:
        log_likelihood_tilde(ex1, [1.0, 1.0], DataSet(A_E), spec)
    assert info.value.min_eigenvalue < 0


def test_batch_marks_failures_with_nan(ex1):
    spec = models.example1_spec(nuisance_var=1.7e-8)
    thetas = np.array([[1.0, 1.0], [0.5, 0.5]])
    ybar, S = DataSet(A_E).whitened_stats(spec)
    vals, lam = loglik_tilde_batch(ex1, thetas, ybar, S, spec)
    assert np.isnan(vals[0]) and np.isfinite(vals[1])
    assert lam[0] < 0 < lam[1]


# ------------------------------------------------------------------- sampling

def test_sample_tilde_matches_plain_without_nuisance(ex1):
    spec = models.example1_spec(nuisance_var=1e-30, n_exp=10_000)
    a = sample_data_tilde(ex1, [1.0, 1.0], spec, RngStream(1)).observations[0]
    b = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(2)).observations[0]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_sample_tilde_covariance(ex1):
    spec = models.example1_spec(nuisance_var=1.5e-8, n_exp=100_000)
    theta = [1.0, 1.0]
    Y = sample_data_tilde(ex1, theta, spec, RngStream(3)).observations
    cov = corrected_likelihood(ex1, theta, spec).updated_cov
    emp = np.cov(Y)
    se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / Y.shape[1])
    assert np.all(np.abs(emp - cov) <= 5 * se)


def test_sample_tilde_reproducible_and_gated(ex1):
    spec = models.example1_spec(nuisance_var=1e-8, n_exp=5)
    a = sample_data_tilde(ex1, [1.0, 1.0], spec, RngStream(4, (1,))).observations
    assert np.array_equal(a, sample_data_tilde(ex1, [1.0, 1.0], spec, RngStream(4, (1,))).observations)
    with pytest.raises(NotPD):
        sample_data_tilde(ex1, [1.0, 1.0], models.example1_spec(nuisance_var=1e-7), RngStream(0))
