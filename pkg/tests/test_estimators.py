import numpy as np
import pytest

from nuisance_oed import (ExperimentSpec, GaussianPrior, NotPD, RngStream, dlmc_nuisance_free, dlmc_small_noise,
                          dlmc_two_loops, dlmcis, mcla, models)
from nuisance_oed.models import LinearModel


def toy_1d(prior_var=1.0):
    """q = 1, g = 2 theta + 0.5 phi with Gaussian everything."""
    model = LinearModel([[2.0]], [[0.5]])
    spec = ExperimentSpec(1, [[0.1]], [[0.2]], GaussianPrior([0.0], [[prior_var]]))
    return model, spec


def test_two_loops_conjugate_toy():
    model, spec = toy_1d()
    sig_y2 = 0.1 + 0.25 * 0.2
    exact = 0.5 * np.log(1 + 4.0 / sig_y2)
    est = dlmc_two_loops(model, spec, 10_000, 1000, 1000, RngStream(1))
    assert abs(est.value - exact) <= 3 * est.std_error
    assert est.n_inner == (1000, 1000)


def test_two_loops_point_mass_prior():
    model, spec = toy_1d(prior_var=1e-12)
    est = dlmc_two_loops(model, spec, 2000, 100, 100, RngStream(2))
    assert abs(est.value) <= 3 * est.std_error + 1e-6


def test_small_noise_dlmc_reduces_to_nuisance_free():
    model = models.make_example2(0.5)
    spec = models.example2_spec(0.5, nuisance_var=1e-30)
    a = dlmc_small_noise(model, spec, 300, 50, RngStream(3))
    b = dlmc_nuisance_free(model, spec, 300, 50, RngStream(3))
    assert abs(a.value - b.value) <= 1e-10


def test_small_noise_dlmc_example2_analytic():
    model, spec = models.make_example2(0.5), models.example2_spec(0.5)
    exact = models.analytic_eig_linear_gaussian(0.5, spec, small_noise=True)
    est = dlmc_small_noise(model, spec, 10_000, 1000, RngStream(4), workers=4)
    assert abs(est.value - exact) <= 3 * est.std_error


def test_small_noise_dlmc_breaks_down_example1(ex1):
    with pytest.raises(NotPD) as info:
        dlmc_small_noise(ex1, models.example1_spec(nuisance_var=1e-7), 50, 20, RngStream(5))
    assert info.value.diagnostics["pd_failures"] >= 1


def test_dlmcis_conjugate_weights_are_constant():
    # the Laplace density is the exact posterior, so every importance weight equals the evidence
    model, spec = models.make_example2(0.3), models.example2_spec(0.3)
    est = dlmcis(model, spec, 200, 20, RngStream(6))
    assert np.max(est.extras["inner_log_weight_var"]) <= 1e-8
    one = dlmcis(model, spec, 200, 1, RngStream(6))
    assert np.allclose(one.terms, est.terms, atol=1e-6)


@pytest.mark.parametrize("xi", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("with_nuisance", [True, False])
def test_dlmcis_matches_closed_form(xi, with_nuisance):
    model, spec = models.make_example2(xi, with_nuisance), models.example2_spec(xi, with_nuisance)
    exact = models.analytic_eig_linear_gaussian(xi, spec, with_nuisance, small_noise=True)
    est = dlmcis(model, spec, 2000, 1, RngStream(7), workers=4)
    assert abs(est.value - exact) <= 4 * est.std_error


def test_mcla_unbiased_in_conjugate_case():
    # Laplace is exact for a linear Gaussian model, so MCLA has no N_e bias there
    for n_exp in (1, 10):
        model, spec = models.make_example2(0.5), models.example2_spec(0.5, n_exp=n_exp)
        exact = models.analytic_eig_linear_gaussian(0.5, spec, small_noise=True)
        est = mcla(model, spec, 10_000, RngStream(8))
        assert abs(est.value - exact) <= 3 * est.std_error


def test_mcla_prior_variance_scaling():
    model = models.make_example2(0.4, with_nuisance=False)
    vals, exact = [], []
    for pv in (1.0, 2.0):
        spec = models.example2_spec(0.4, with_nuisance=False, prior_var=pv, n_exp=10_000)
        vals.append(mcla(model, spec, 500, RngStream(9)).value)
        exact.append(models.analytic_eig_linear_gaussian(0.4, spec, with_nuisance=False, small_noise=True))
    # common random numbers: the difference is deterministic
    assert vals[1] - vals[0] == pytest.approx(exact[1] - exact[0], abs=1e-10)
    assert vals[1] - vals[0] == pytest.approx(2 * np.log(np.sqrt(2)), abs=1e-3)


def test_mcla_map_variant_agrees():
    model, spec = models.make_example2(0.5), models.example2_spec(0.5, n_exp=10)
    exact = models.analytic_eig_linear_gaussian(0.5, spec, small_noise=True)
    est = mcla(model, spec, 2000, RngStream(10), use_map=True)
    assert abs(est.value - exact) <= 4 * est.std_error


def test_mcla_breakdown_example1(ex1):
    assert np.isfinite(mcla(ex1, models.example1_spec(nuisance_var=1.0e-8), 500, RngStream(11)).value)
    with pytest.raises(NotPD):
        mcla(ex1, models.example1_spec(nuisance_var=3e-8), 500, RngStream(11))


@pytest.mark.parametrize("name", ["dlmc", "dlmcis", "mcla"])
def test_variance_scales_like_one_over_n(name):
    model, spec = models.make_example2(0.5), models.example2_spec(0.5)
    # with few inner samples the DLMC terms are heavy tailed and small-N variances run low
    run = {"dlmc": lambda n: dlmc_small_noise(model, spec, n, 200, RngStream(12), workers=4),
           "dlmcis": lambda n: dlmcis(model, spec, n, 1, RngStream(12), workers=4),
           "mcla": lambda n: mcla(model, spec, n, RngStream(12))}[name]
    scaled = [run(n).variance_of_mean * n for n in (100, 1000, 10_000)]
    assert max(scaled) / min(scaled) <= 1.5


def test_dlmc_inner_bias_halves_with_double_m():
    model, spec = models.make_example2(0.5), models.example2_spec(0.5)
    exact = models.analytic_eig_linear_gaussian(0.5, spec, small_noise=True)
    b1 = dlmc_small_noise(model, spec, 20_000, 25, RngStream(13), workers=4)
    b2 = dlmc_small_noise(model, spec, 20_000, 50, RngStream(14), workers=4)
    bias1, bias2 = b1.value - exact, b2.value - exact
    assert bias1 > 0 and bias2 > 0
    assert 1.4 <= bias1 / bias2 <= 2.8


@pytest.mark.parametrize("name", ["dlmc2", "dlmc", "dlmcis", "mcla"])
def test_worker_count_does_not_change_results(name):
    model, spec = models.make_example2(0.7), models.example2_spec(0.7)
    run = {"dlmc2": lambda w: dlmc_two_loops(model, spec, 300, 20, 20, RngStream(15), workers=w),
           "dlmc": lambda w: dlmc_small_noise(model, spec, 300, 20, RngStream(15), workers=w),
           "dlmcis": lambda w: dlmcis(model, spec, 300, 2, RngStream(15), workers=w),
           "mcla": lambda w: mcla(model, spec, 300, RngStream(15), workers=w)}[name]
    a, b = run(1), run(3)
    assert a.value == b.value and a.variance_of_mean == b.variance_of_mean
    assert np.array_equal(a.terms, b.terms)


def test_underflow_guard_keeps_result_finite():
    model = models.make_example2(0.5)
    spec = models.example2_spec(0.5, noise_var=1e-8, nuisance_var=1e-12, prior_var=1.0, n_exp=5)
    est = dlmc_small_noise(model, spec, 200, 20, RngStream(16))
    assert np.isfinite(est.value) and np.all(np.isfinite(est.terms))
    assert est.diagnostics["underflow_guards"] > 0


def test_single_outer_sample_has_infinite_variance():
    model, spec = models.make_example2(0.5), models.example2_spec(0.5)
    est = mcla(model, spec, 1, RngStream(17))
    assert np.isfinite(est.value) and est.variance_of_mean == np.inf


def test_integer_seed_accepted():
    model, spec = models.make_example2(0.5), models.example2_spec(0.5)
    assert mcla(model, spec, 50, 5).value == mcla(model, spec, 50, RngStream(5)).value
