import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from nuisance_oed import (DataSet, ExperimentSpec, GaussianPrior, NotSPD, RngStream, UniformBoxPrior, models,
                          sample_prior, simulate_data)
from nuisance_oed.core import chol_spd, log_gaussian


def test_stream_reproducible_and_distinct():
    a = RngStream(42, (1, 2)).generator().standard_normal(5)
    b = RngStream(42, (1, 2)).generator().standard_normal(5)
    c = RngStream(42, (1, 3)).generator().standard_normal(5)
    d = RngStream(43, (1, 2)).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)


def test_stream_child_extends_path():
    s = RngStream(7).child(2, 5).child(1)
    assert s.path == (2, 5, 1)
    assert s.label == "2/5/1"
    assert RngStream(7).label == "root"


def test_sibling_streams_uncorrelated():
    x = np.concatenate([RngStream(0, (k,)).generator().standard_normal(1) for k in range(4000)])
    y = np.concatenate([RngStream(0, (k, 0)).generator().standard_normal(1) for k in range(4000)])
    assert abs(np.corrcoef(x, y)[0, 1]) < 4 / np.sqrt(4000)
    assert stats.kstest(x, "norm").pvalue > 0.001


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_stream_rejects_bad_seed(seed):
    with pytest.raises(ValueError):
        RngStream(seed)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        UniformBoxPrior([0, 0], [0, 0])


def test_singular_gaussian_rejected():
    with pytest.raises(NotSPD):
        GaussianPrior([0.0, 0.0], np.zeros((2, 2)))


def test_gaussian_prior_mean_lln():
    prior = GaussianPrior(np.ones(2), 1e-4 * np.eye(2))
    draws = prior.sample(RngStream(1).generator(), 100_000)
    assert np.all(np.abs(draws.mean(axis=0) - 1.0) < 3 * 1e-2 / np.sqrt(1e5))


def test_sample_prior_deterministic():
    prior = UniformBoxPrior([-1, 0], [1, 2])
    a = sample_prior(prior, RngStream(3, (4,)))
    assert np.array_equal(a, sample_prior(prior, RngStream(3, (4,))))
    assert prior.contains(a)


def test_gaussian_prior_logpdf_matches_scipy():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    prior = GaussianPrior([1.0, -1.0], cov)
    pts = RngStream(5).generator().standard_normal((6, 2))
    ref = stats.multivariate_normal([1.0, -1.0], cov).logpdf(pts)
    assert np.allclose(prior.logpdf(pts), ref, rtol=0, atol=1e-12)
    assert prior.logpdf(pts[0]) == pytest.approx(ref[0], abs=1e-12)


def test_uniform_logpdf_outside_is_minus_inf():
    prior = UniformBoxPrior([0, 0], [2, 4])
    assert prior.logpdf([1, 1]) == pytest.approx(-np.log(8))
    assert prior.logpdf([3, 1]) == -np.inf
    assert np.array_equal(prior.project([3, -1]), [2, 0])


def test_log_gaussian_trivial_values():
    assert log_gaussian([0, 0], [0, 0], np.eye(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-15)
    assert log_gaussian([1, 0], [0, 0], np.eye(2)) == pytest.approx(-np.log(2 * np.pi) - 0.5, abs=1e-15)


def test_log_gaussian_direct_inverse_oracle():
    gen = RngStream(9).generator()
    a = gen.standard_normal((3, 3))
    cov = a @ a.T + 0.5 * np.eye(3)
    x, m = gen.standard_normal(3), gen.standard_normal(3)
    r = x - m
    direct = -0.5 * (3 * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + r @ np.linalg.inv(cov) @ r)
    assert log_gaussian(x, m, cov) == pytest.approx(direct, abs=1e-12)


def test_log_gaussian_normalized_1d():
    sig = 0.3
    val, _ = integrate.quad(lambda x: np.exp(log_gaussian([x], [0.2], [[sig**2]])), 0.2 - 10 * sig, 0.2 + 10 * sig,
                            epsabs=1e-13, epsrel=1e-13)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_log_gaussian_no_underflow_far_out():
    # the density itself underflows; its log must stay finite
    val = log_gaussian([60.0], [0.0], [[1.0]])
    assert np.isfinite(val) and val == pytest.approx(-1800 - 0.5 * np.log(2 * np.pi))


@pytest.mark.parametrize("bad", [np.array([[1.0, 2.0], [0.0, 1.0]]), -np.eye(2), np.array([[1.0, np.nan], [np.nan, 1.0]]),
                                 np.ones((2, 3))])
def test_chol_spd_rejects(bad):
    with pytest.raises(NotSPD):
        chol_spd(bad)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_chol_spd_reconstructs(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    s = a @ a.T + n * np.eye(n)
    L = chol_spd(s)
    assert np.allclose(L @ L.T, s, atol=1e-10)
    assert np.allclose(L, np.tril(L))


def test_simulate_data_vanishing_noise(ex1):
    spec = models.example1_spec(noise_var=1e-12, n_exp=4)
    data = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(0))
    assert np.allclose(data.observations, np.array([12.0, 25.0, 48.0])[:, None], atol=1e-5)


def test_simulate_data_mean_example1(ex1):
    spec = models.example1_spec(n_exp=100_000)
    data = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(1))
    se = 1e-2 / np.sqrt(1e5)
    assert np.all(np.abs(data.observations.mean(axis=1) - [12, 25, 48]) < 4 * se)


def test_simulate_data_deterministic_and_checked(ex1):
    spec = models.example1_spec(n_exp=3)
    a = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(2, (5,)))
    b = simulate_data(ex1, [1.0, 1.0], [0.0, 0.0], spec, RngStream(2, (5,)))
    assert np.array_equal(a.observations, b.observations)
    with pytest.raises(ValueError):
        simulate_data(ex1, [1.0], [0.0, 0.0], spec, RngStream(2))


def test_spec_rejects_degenerate_noise():
    with pytest.raises(NotSPD):
        ExperimentSpec(1, np.zeros((2, 2)), np.eye(1), GaussianPrior([0.0], [[1.0]]))


def test_whitened_stats_reproduce_quadratic_forms():
    gen = RngStream(4).generator()
    a = gen.standard_normal((3, 3))
    noise = a @ a.T + np.eye(3)
    spec = ExperimentSpec(5, noise, np.zeros((0, 0)), GaussianPrior([0.0], [[1.0]]))
    Y = gen.standard_normal((3, 5))
    g = gen.standard_normal(3)
    ybar, S = DataSet(Y).whitened_stats(spec)
    d = ybar - spec.whiten(g)
    direct = sum((y - g) @ np.linalg.solve(noise, y - g) for y in Y.T)
    assert np.trace(S) + 5 * d @ d == pytest.approx(direct, rel=1e-12)


def test_dataset_column_count_checked():
    spec = models.example1_spec(n_exp=2)
    with pytest.raises(ValueError):
        DataSet(np.zeros((3, 3))).whitened_stats(spec)


@pytest.mark.parametrize("make", [models.make_example1, lambda: models.make_example2(0.3)])
def test_analytic_jacobians_match_central_differences(make):
    model = make()
    gen = RngStream(8).generator()
    for _ in range(5):
        theta = 1.0 + gen.standard_normal(model.d_theta)
        phi0 = np.zeros(model.d_phi)
        jt = _fd(lambda t: model.eval(t, phi0), theta)
        jp = _fd(lambda p: model.eval(theta, p), phi0)
        assert np.allclose(model.jac_theta0(theta), jt, rtol=1e-5, atol=1e-8)
        assert np.allclose(model.jac_phi0(theta), jp, rtol=1e-5, atol=1e-8)


def _fd(f, x, h=1e-6):
    return np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)], axis=-1)


def test_batch_matches_pointwise(ex1):
    thetas = RngStream(6).generator().standard_normal((4, 2))
    phis = 1e-3 * RngStream(7).generator().standard_normal((4, 2))
    batch = ex1.eval_batch(thetas, phis)
    assert np.allclose(batch, np.stack([ex1.eval(t, p) for t, p in zip(thetas, phis)]), rtol=1e-14)
    assert np.allclose(ex1.jac_phi0_batch(thetas), np.stack([ex1.jac_phi0(t) for t in thetas]), rtol=1e-14)
