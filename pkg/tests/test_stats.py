import numpy as np
import pytest

from randgreen.ensemble import Dirac, FiniteMixture, MapSequence
from randgreen.errors import NoiseFloor, VarianceZero
from randgreen.measure import EmpiricalMeasure
from randgreen.proj import RationalMap
from randgreen.stats import (
    circle_diagnostics,
    correlation,
    markov_clt,
    potential_vs_fiber,
    skew_clt,
    stationarity_test,
    variance_scaling,
)
from randgreen.transfer import constant, default_panel, moment

Z2 = Dirac(RationalMap.quadratic(0))
MIX = FiniteMixture.uniform([RationalMap.quadratic(0), RationalMap.quadratic(-1)])


def test_circle_diagnostics_on_exact_circle():
    theta = 2 * np.pi * (np.arange(1000) + 0.5) / 1000
    m = EmpiricalMeasure.uniform(np.stack([np.exp(1j * theta), np.ones(1000)], axis=1))
    rep = circle_diagnostics(m)
    assert rep.ks <= 1e-3 and rep.radial_fraction == 1.0


def test_circle_diagnostics_detects_a_point_mass():
    m = EmpiricalMeasure.uniform(np.array([[2.0, 1.0]] * 10))
    rep = circle_diagnostics(m)
    assert rep.ks > 0.4 and rep.radial_fraction == 0.0


def test_potential_matches_fiber_small():
    rep, m_pot, m_fib = potential_vs_fiber(MapSequence(MIX, 1), default_panel(), 192, 20,
                                           samples=4000, depth=20, seed=2)
    assert rep.discrepancy <= 0.08
    assert abs(rep.mass_info["defect"]) < 0.01
    assert len(m_fib) == 4000


def test_stationarity_small():
    panel = default_panel()[:8]
    rep = stationarity_test(MIX, panel, chains=40, length=400, burn_in=100, seed=3)
    assert len(rep.passed) == 8
    assert sum(rep.passed) >= 7
    assert rep.to_dict()["observables"][0]["name"] == panel[0].name


def test_correlation_with_constant_is_zero():
    with pytest.raises(NoiseFloor) as info:
        correlation(MIX, moment("abs_x2"), constant(2.0), [0, 1, 2], chains=300, n_pre=8)
    rep = info.value.report
    assert rep.values == [0.0, 0.0, 0.0] and all(rep.censored)


def test_correlation_lag_zero_is_variance():
    rep = correlation(MIX, moment("abs_x2"), moment("abs_x2"), [0, 1, 2, 3], chains=3000,
                      n_pre=15, seed=1)
    assert not rep.censored[0]
    assert rep.values[0] > 0
    assert all(abs(c) <= rep.values[0] + 3 * s for c, s in zip(rep.values, rep.se))


def test_correlation_of_odd_observable_censors_positive_lags():
    # fibers of z^2 + c are symmetric, so Re(x ybar) decorrelates after one step
    rep = correlation(MIX, moment("re_xy"), moment("re_xy"), [0, 1, 2], chains=2000, n_pre=10)
    assert rep.censored == [False, True, True]
    assert all(abs(c) <= 3 * s for c, s, k in zip(rep.values, rep.se, rep.censored) if k)
    assert rep.noise_floor_index == 1
    assert rep.rate is None
    assert rep.to_csv().count("\n") == 4


def test_correlation_is_reproducible():
    kw = dict(chains=500, n_pre=8, seed=9)
    a = correlation(MIX, moment("abs_x2"), moment("abs_x2"), [0, 1], **kw)
    b = correlation(MIX, moment("abs_x2"), moment("abs_x2"), [0, 1], **kw)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("fn", [skew_clt, markov_clt])
def test_clt_zero_observable_is_degenerate(fn):
    with pytest.raises(VarianceZero) as info:
        fn(MIX, constant(0.0), n=20, chains=100, seed=1, J=3)
    rep = info.value.report
    assert rep.degenerate and rep.ks is None
    np.testing.assert_array_equal(rep.sums, 0.0)


@pytest.mark.parametrize("fn", [skew_clt, markov_clt])
def test_clt_reports_are_reproducible(fn):
    kw = dict(n=30, chains=300, seed=4, sigma2=0.01)
    a = fn(MIX, moment("abs_x2"), **kw)
    b = fn(MIX, moment("abs_x2"), **kw)
    np.testing.assert_array_equal(a.sums, b.sums)
    assert a.to_dict() == b.to_dict()
    assert a.csvs() == b.csvs()
    assert set(a.csvs()) == {"sums.csv", "histogram.csv", "qq.csv"}


def test_markov_clt_variance_matches_batches():
    rep = markov_clt(Z2, moment("re_xy"), n=200, chains=2000, seed=5)
    assert rep.sigma2_source == "gordin"
    assert abs(rep.sigma2 - rep.batch_variance) <= 4 * rep.batch_variance_se + 0.01
    assert rep.ks <= 0.05
    assert abs(rep.mean) <= 3 * rep.mean_se


def test_variance_scaling_stabilizes():
    rep = variance_scaling(MIX, default_panel(), 256, 2000, seed=1)
    assert rep.all_passed, rep.to_dict()
    assert all(v > 1e-4 for v in rep.var_n)


def test_variance_scaling_constant_on_support():
    rep = variance_scaling(Z2, [moment("abs_x2")], 256, 200, seed=2)
    assert rep.var_n[0] <= 1e-8 and rep.all_passed
