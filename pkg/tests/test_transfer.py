import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randgreen.ensemble import CoefficientBall, Dirac, FiniteMixture, MapSequence
from randgreen.errors import FitUnreliable, SingularHit
from randgreen.measure import EmpiricalMeasure, estimate_nu
from randgreen.proj import PointP1, RationalMap, fs_distance_arr, normalize_rows, preimages
from randgreen.transfer import (
    coboundary,
    coboundary_variance,
    compose,
    composed_transfer,
    constant,
    decay_norm,
    default_panel,
    dsh_log_pair,
    envelope_slope,
    fs_distance_to,
    gordin_series,
    linear_combination,
    markov_operator,
    markov_powers,
    moment,
    observable_from_spec,
    sigma_squared,
    transfer_apply,
    transfer_values,
)

F = RationalMap.quadratic(0)
G = RationalMap.quadratic(-1)
Z2 = Dirac(F)
MIX = FiniteMixture.uniform([F, G])
RE = moment("re_xy")


def rand_points(rng, n):
    return normalize_rows(rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2)))


def rand_map(rng, d=2):
    c = rng.normal(size=2 * d + 2) + 1j * rng.normal(size=2 * d + 2)
    return RationalMap(d, tuple(c[:d + 1]), tuple(c[d + 1:]))


seeds = st.integers(0, 2**32 - 1)


def test_panel_names_and_bounds():
    panel = default_panel()
    assert len(panel) == 12 and len({p.name for p in panel}) == 12
    assert all(math.isfinite(p.norm_bound) for p in panel)
    assert {p.kind for p in panel} == {"smooth", "holder", "dsh"}


def test_transfer_apply_examples():
    assert transfer_apply(F, RE, PointP1(1, 1)) == pytest.approx(0.0, abs=1e-15)
    assert transfer_apply(F, moment("abs_x2"), PointP1(0, 1)) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_transfer_is_positive_linear_and_unital(seed):
    rng = np.random.default_rng(seed)
    C = rand_map(rng, int(rng.integers(1, 4))).coeffs
    X = rand_points(rng, 8)
    a, b = rng.normal(size=2)
    phi, psi = moment("abs_x2"), fs_distance_to(0.5j, 0.5)
    combo = linear_combination([(a, phi), (b, psi)])
    np.testing.assert_allclose(transfer_values(C, combo, X),
                               a * transfer_values(C, phi, X) + b * transfer_values(C, psi, X),
                               atol=1e-12)
    assert np.all(transfer_values(C, psi, X) >= 0)
    np.testing.assert_allclose(transfer_values(C, constant(2.5), X), 2.5)
    sup = np.abs(psi.evaluate(rand_points(rng, 4000))).max()
    assert np.all(np.abs(transfer_values(C, psi, X)) <= (math.pi / 2) ** 0.5 + 1e-12)
    assert sup <= (math.pi / 2) ** 0.5


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_adjunction(seed):
    rng = np.random.default_rng(seed)
    f = rand_map(rng)
    X = rand_points(rng, 5)
    for psi in default_panel()[:10]:
        np.testing.assert_allclose(transfer_values(f.coeffs, compose(psi, f), X),
                                   psi.evaluate(X), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_holder_norm_bounds(seed):
    rng = np.random.default_rng(seed)
    Z = rand_points(rng, 500)
    W = normalize_rows(Z + 10.0 ** rng.uniform(-6, 0) * (rng.normal(size=(500, 2))
                                                         + 1j * rng.normal(size=(500, 2))))
    dist = fs_distance_arr(Z, W)
    for psi in default_panel()[:10]:
        inc = np.abs(psi.evaluate(Z) - psi.evaluate(W))
        assert np.all(inc <= psi.norm_bound * dist ** psi.beta + 1e-12), psi.name
        assert np.all(np.abs(psi.evaluate(Z)) <= psi.norm_bound)


def test_dsh_warns_at_singularity():
    psi = dsh_log_pair(0.5, 2)
    with pytest.warns(SingularHit):
        v = psi.evaluate(PointP1(0.5, 1))
    # the pole factor at [0.5:1] is |0.5 - 2| / (sqrt(5) sqrt(1.25)) = 0.6
    assert v == pytest.approx(-psi.clip - math.log(0.6))


def test_observable_spec_round_trip():
    X = rand_points(np.random.default_rng(0), 20)
    for psi in default_panel():
        again = observable_from_spec(psi.spec)
        assert again.name == psi.name
        np.testing.assert_allclose(again.evaluate(X), psi.evaluate(X))


def test_composed_transfer_small_depths():
    s = MapSequence(MIX, 3)
    x = PointP1(0.3, 1)
    assert composed_transfer(s, RE, 0, x)[0] == pytest.approx(RE.evaluate(x))
    assert composed_transfer(s, RE, 1, x)[0] == pytest.approx(transfer_apply(s.entry(0), RE, x))


def test_composed_transfer_order_of_pullback():
    # L_1 L_0 psi(x) averages psi over the leaves of f_0^-1 f_1^-1 (x)
    s = MapSequence(MIX, 11)
    x = PointP1(0.7, 1)
    leaves = [y for z, _ in preimages(s.entry(1), x) for y, _ in preimages(s.entry(0), z)]
    expect = np.mean([RE.evaluate(y) for y in leaves])
    assert composed_transfer(s, RE, 2, x)[0] == pytest.approx(expect, abs=1e-12)


def test_exact_and_monte_carlo_agree():
    s = MapSequence(Z2, 0)
    psi = moment("re_xy", 2)
    x = PointP1(0.6 + 0.2j, 1)
    exact, _ = composed_transfer(s, psi, 10, x, "exact")
    mc, se = composed_transfer(s, psi, 10, x, "monte_carlo", samples=100_000, seed=1)
    assert abs(exact - mc) <= 4 * se


@pytest.mark.parametrize("n", [1, 4, 8, 12])
def test_monte_carlo_unbiased_on_mixture(n):
    s = MapSequence(MIX, n)
    x = PointP1(-0.3 + 0.8j, 1)
    for psi in (moment("abs_x2"), fs_distance_to(1j, 0.5), dsh_log_pair(0.5, 2)):
        exact, _ = composed_transfer(s, psi, n, x, "exact")
        mc, se = composed_transfer(s, psi, n, x, "monte_carlo", samples=20_000, seed=n)
        assert abs(exact - mc) <= 4 * se + 1e-12, psi.name


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_sup_contraction_signed(seed):
    rng = np.random.default_rng(seed)
    C = rand_map(rng).coeffs
    X = rand_points(rng, 50)
    for psi in (RE, moment("im_x2y2"), dsh_log_pair(0.5, 2)):
        sup = {"re_xy": 0.5, "im_x2y2": 0.25}.get(psi.name, psi.clip)
        assert np.all(np.abs(transfer_values(C, psi, X)) <= sup + 1e-12)


def test_markov_operator_examples():
    x = PointP1(0.2 - 0.4j, 1)
    psi = moment("abs_x2")
    assert markov_operator(Z2, psi, x)[0] == pytest.approx(transfer_apply(F, psi, x))
    half = 0.5 * transfer_apply(F, psi, x) + 0.5 * transfer_apply(G, psi, x)
    assert markov_operator(MIX, psi, x)[0] == pytest.approx(half)
    for e in (Z2, MIX, CoefficientBall(F, 0.05)):
        v, _ = markov_operator(e, constant(1.0), x, samples=16)
        assert v == pytest.approx(1.0)


def test_markov_powers_exact_vs_mc():
    X = rand_points(np.random.default_rng(5), 4)
    psi = moment("abs_x2", 2)
    ex = markov_powers(MIX, psi, X, 4, "exact")
    mc = markov_powers(MIX, psi, X, 4, "monte_carlo", paths=20_000, seed=2)
    assert ex.exact and not mc.exact
    np.testing.assert_allclose(mc.values, ex.values, atol=0.02)


def test_decay_constant_observable():
    s = MapSequence(MIX, 0)
    rep = decay_norm(s, MIX, constant(3.0), [1, 2, 3], samples=200, n_pre=10)
    assert rep.norms == [0.0, 0.0, 0.0]
    assert rep.center == pytest.approx(3.0)


def test_decay_odd_observable_is_unreliable():
    # fibers of z^2 + c are symmetric under z -> -z, so L psi = 0 for odd psi
    with pytest.raises(FitUnreliable) as info:
        decay_norm(MapSequence(MIX, 0), MIX, RE, [1, 2, 3], samples=300, n_pre=10)
    assert all(info.value.report.censored)


def test_decay_tiny_budget_is_unreliable():
    with pytest.raises(FitUnreliable):
        decay_norm(MapSequence(MIX, 0), MIX, moment("abs_x2"), range(1, 16), samples=8,
                   n_pre=10, mode="monte_carlo", mc_samples=2)


def test_decay_measurable_observable():
    rep = decay_norm(MapSequence(MIX, 1), MIX, moment("abs_x2"), [1, 2, 3, 4], samples=2000,
                     n_pre=15)
    assert not any(rep.censored)
    assert rep.slope < 0
    assert rep.envelope_slope == pytest.approx(envelope_slope(moment("abs_x2"), 2))


def test_envelope_slopes():
    assert envelope_slope(RE, 2) == pytest.approx(-0.5 * math.log(2))
    assert envelope_slope(fs_distance_to(1, 0.5), 3) == pytest.approx(-0.25 * math.log(3))
    assert envelope_slope(dsh_log_pair(0.5, 2), 2) == pytest.approx(-math.log(2))


@pytest.fixture(scope="module")
def nu_z2():
    return estimate_nu(Z2, 200, 300, 200, seed=5)


def test_gordin_zero_observable(nu_z2):
    g = gordin_series(Z2, constant(0.0), 4, nu_z2)
    assert g.norms == [0.0] * 5
    np.testing.assert_array_equal(g.g_values(nu_z2.points[:10]), 0.0)


def test_gordin_depth_zero(nu_z2):
    psi = moment("abs_x2", 2)
    g = gordin_series(Z2, psi, 0, nu_z2)
    v = psi.evaluate(nu_z2.points)
    expect = math.sqrt(nu_z2.weights @ (v - nu_z2.weights @ v) ** 2)
    assert g.norms == [pytest.approx(expect)]


def test_sigma_zero_observable(nu_z2):
    rep = sigma_squared(Z2, constant(0.0), 3, nu_z2)
    assert rep.sigma2 == 0.0 and rep.coboundary


def test_sigma_real_part_on_z2(nu_z2):
    # closed form for z^2 with psi = Re(x ybar): 1/8
    rep = sigma_squared(Z2, RE, 8, nu_z2, seed=1)
    assert abs(rep.sigma2 - 0.125) <= max(4 * rep.se, 0.005)
    assert not rep.coboundary


def test_sigma_of_coboundary(nu_z2):
    g0 = linear_combination([(1.0, moment("re_x2y2")), (1.0, RE)])
    psi = coboundary(Z2, g0)
    direct, se_d = coboundary_variance(Z2, g0, nu_z2)
    rep = sigma_squared(Z2, psi, 8, nu_z2, seed=2)
    assert abs(rep.sigma2 - direct) <= 4 * math.hypot(rep.se, se_d) + 0.005


def test_coboundary_of_constant_vanishes():
    psi = coboundary(MIX, constant(2.0))
    X = rand_points(np.random.default_rng(1), 10)
    np.testing.assert_allclose(psi.evaluate(X), 0.0, atol=1e-14)
    nu = EmpiricalMeasure.uniform(X)
    assert coboundary_variance(MIX, constant(2.0), nu)[0] == pytest.approx(0.0, abs=1e-12)


def test_monte_carlo_powers_ignore_chunking(monkeypatch):
    import randgreen.transfer as tr
    X = rand_points(np.random.default_rng(3), 7)
    ref = markov_powers(MIX, RE, X, 3, "monte_carlo", paths=64, seed=5)
    monkeypatch.setattr(tr, "LEAF_CHUNK", 100)
    small = markov_powers(MIX, RE, X, 3, "monte_carlo", paths=64, seed=5)
    np.testing.assert_array_equal(ref.halves, small.halves)
