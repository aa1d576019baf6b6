import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randgreen.ensemble import CoefficientBall, Dirac, FiniteMixture, MapSequence
from randgreen.green import (
    PotentialGrid,
    chart_lift,
    equilibrium_measure,
    green_function,
    green_values,
    holder_modulus,
    invariance_residual,
    measure_from_potential,
    potential_grid,
    truncation_bound,
)
from randgreen.measure import hopf
from randgreen.proj import PointP1, RationalMap, normalize_rows

Z2 = Dirac(RationalMap.quadratic(0))
MIX = FiniteMixture.uniform([RationalMap.quadratic(0), RationalMap.quadratic(-1)])


def unit_points(seed, n):
    rng = np.random.default_rng(seed)
    return normalize_rows(rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2)))


def test_closed_form_z2():
    Z = unit_points(0, 50)
    G = green_function(MapSequence(Z2, 0), Z, 30, lift="given").value
    np.testing.assert_allclose(G, np.log(np.abs(Z).max(axis=1)), atol=1e-8)


def test_unnormalized_vector_includes_its_norm():
    est = green_function(MapSequence(Z2, 0), np.array([2.0, 1.0]), 40, lift="given")
    assert est.value == pytest.approx(math.log(2), abs=1e-10)


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_balanced_points_exact_at_every_depth(n):
    theta = np.linspace(0, 2 * np.pi, 7)
    Z = np.stack([np.ones(7), np.exp(1j * theta)], axis=1) / math.sqrt(2)
    G = green_values(MapSequence(Z2, 0), Z, n, lift="given")
    np.testing.assert_allclose(G, math.log(1 / math.sqrt(2)) + 0.5 * 2.0 ** -n * math.log(2),
                               rtol=0, atol=1e-14)


def test_depth_zero():
    s = MapSequence(MIX, 0)
    est = green_function(s, PointP1(0.3, 1), 0)
    assert est.value == pytest.approx(0.0, abs=1e-15)
    assert est.truncation_bound == pytest.approx(truncation_bound(s, 0))
    assert est.truncation_bound > truncation_bound(s, 1)


def test_truncation_bound_holds_and_decreases():
    s = MapSequence(MIX, 4)
    Z = unit_points(1, 40)
    ref = green_values(s, Z, 60)
    bounds = [truncation_bound(s, n) for n in range(0, 20)]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))
    for n in (0, 3, 8, 15):
        assert np.max(np.abs(green_values(s, Z, n) - ref)) <= bounds[n]


def test_telescoping_increments():
    s = MapSequence(MIX, 2)
    Z = unit_points(2, 20)
    for n in range(10):
        step = green_values(s, Z, n + 1) - green_values(s, Z, n)
        assert np.max(np.abs(step)) <= truncation_bound(s, n) - truncation_bound(s, n + 1) + 1e-12


def test_ball_without_rejection_has_no_bound():
    s = MapSequence(CoefficientBall(RationalMap.quadratic(0), 0.05, reject=False), 0)
    with pytest.warns(UserWarning):
        est = green_function(s, PointP1(1, 1), 5)
    assert est.truncation_bound == math.inf


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 20))
def test_invariance_residual_property(seed, n):
    s = MapSequence(MIX, seed)
    assert invariance_residual(s, unit_points(seed, 3), n) <= 1e-10


def test_invariance_examples():
    assert invariance_residual(MapSequence(Z2, 0), PointP1(0.4, 1), 10) <= 1e-10
    assert invariance_residual(MapSequence(MIX, 1), PointP1(2, 1j), 20) <= 1e-9
    assert invariance_residual(MapSequence(MIX, 1), PointP1(2, 1j), 0) <= 1e-15


def test_grid_matches_log_plus():
    n = 8
    g = potential_grid(MapSequence(Z2, 0), "z", 256, n, lift="given")
    err = np.max(np.abs(g.affine_potential() - np.log(np.maximum(np.abs(g.coords), 1))))
    assert err <= 2.0 ** -n * math.log(2)


def test_single_cell_grid():
    s = MapSequence(MIX, 0)
    g = potential_grid(s, "z", 1, 10, extent=(0, 1, 0, 1))
    expect = green_values(s, chart_lift("z", np.array([0.5 + 0.5j])), 10)
    assert g.values.shape == (1, 1)
    assert g.values[0, 0] == pytest.approx(expect[0])


def test_charts_agree_on_overlap():
    s = MapSequence(MIX, 5)
    t = np.array([0.5 + 0.7j, -1.2 + 0.1j, 2j])
    np.testing.assert_allclose(green_values(s, chart_lift("z", t), 20),
                               green_values(s, chart_lift("w", 1 / t), 20), atol=1e-12)


def test_grid_text_round_trip():
    g = potential_grid(MapSequence(MIX, 0), "w", 8, 6)
    h = PotentialGrid.from_text(g.to_text())
    np.testing.assert_array_equal(h.values, g.values)
    assert h.header() == g.header()


def test_measure_concentrates_on_unit_circle():
    m, info = equilibrium_measure(MapSequence(Z2, 0), 512, 25)
    r = np.abs(m.points[:, 0] / m.points[:, 1])
    assert m.weights[(r > 0.9) & (r < 1.1)].sum() >= 0.95
    assert abs(info.defect) < 1e-3


def test_measure_is_angularly_uniform():
    m, _ = equilibrium_measure(MapSequence(Z2, 0), 256, 25)
    angle = np.angle(m.points[:, 0] / m.points[:, 1])
    sector = np.floor((angle + np.pi) / (np.pi / 4)).astype(int) % 8
    masses = np.bincount(sector, weights=m.weights, minlength=8)
    np.testing.assert_allclose(masses, 1 / 8, atol=0.01)


def test_zero_potential_gives_fubini_study():
    ext = (-1.5, 1.5, -1.5, 1.5)
    grids = [PotentialGrid(c, 300, ext, 0, 0.0, np.zeros((300, 300))) for c in ("z", "w")]
    m, info = measure_from_potential(*grids)
    assert abs(info.defect) < 1e-3
    # FS mass of the disc |z| < 1 is 1/2
    H = hopf(m.points)
    assert m.weights[H[:, 2] > 0].sum() == pytest.approx(0.5, abs=0.01)


def test_measure_needs_both_charts():
    g = potential_grid(MapSequence(Z2, 0), "z", 16, 4)
    with pytest.raises(ValueError):
        measure_from_potential(g, g)


def test_holder_away_from_circle():
    rep = holder_modulus(MapSequence(Z2, 0), (1.4, 1.8, -0.2, 0.2), [1e-2, 1e-3, 1e-4], 200,
                         30, seed=1)
    assert rep.beta_hat == pytest.approx(1.0, abs=0.1)


def test_holder_straddling_circle():
    rep = holder_modulus(MapSequence(Z2, 0), (0.9, 1.1, -0.1, 0.1), [1e-2, 1e-3, 1e-4], 200,
                         30, seed=2)
    assert rep.beta_hat == pytest.approx(1.0, abs=0.1)


def test_holder_single_scale_has_no_fit():
    rep = holder_modulus(MapSequence(Z2, 0), (0.9, 1.1, -0.1, 0.1), [1e-2], 50, 30)
    assert len(rep.sup_increments) == 1 and rep.beta_hat is None
