import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randgreen.errors import DegenerateEvaluation
from randgreen.proj import (
    PointP1,
    RationalMap,
    conjugate,
    dist_to_degenerate,
    evaluate,
    fs_distance,
    fs_distance_arr,
    lift_eval,
    min_norm_lower_bound,
    min_sphere_norm,
    normalize_rows,
    parse_map,
    preimage_roots,
    preimages,
    random_unitary,
    resultant,
)

Z2 = RationalMap.quadratic(0)
SQ = lambda: RationalMap(2, (0, 0, 1), (1, 0, 0))  # (X^2, Y^2)

finite = st.floats(-3, 3, allow_nan=False)
cplx = st.builds(complex, finite, finite)


def close(p: PointP1, q: PointP1, tol=1e-12):
    return fs_distance(p, q) <= tol


# -- points and distance -----------------------------------------------------

def test_fs_distance_examples():
    a = PointP1(1, 0)
    b = PointP1(0, 1)
    c = PointP1(1, 1)
    assert fs_distance(a, a) == 0.0
    assert fs_distance(a, b) == pytest.approx(math.pi / 2)
    assert fs_distance(c, a) == pytest.approx(math.pi / 4)


def test_point_rejects_zero():
    with pytest.raises(ValueError):
        PointP1(0, 0)


def test_affine_round_trip():
    p = PointP1.from_affine(0.3 - 2j)
    assert p.affine == pytest.approx(0.3 - 2j)
    assert math.isinf(abs(PointP1.from_affine(math.inf).affine))


@given(cplx, cplx, st.floats(0, 2 * math.pi))
def test_fs_distance_phase_invariant_and_bounded(z, w, phi):
    p, q = PointP1(z, 1), PointP1(1, w)
    r = PointP1(np.exp(1j * phi) * p.x, np.exp(1j * phi) * p.y)
    d = fs_distance(p, q)
    assert 0 <= d <= math.pi / 2 + 1e-15
    assert fs_distance(r, q) == pytest.approx(d, abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_fs_distance_unitary_invariant(seed):
    rng = np.random.default_rng(seed)
    Z = normalize_rows(rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2)))
    W = normalize_rows(rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2)))
    U = random_unitary(rng)
    np.testing.assert_allclose(fs_distance_arr(Z @ U.T, W @ U.T), fs_distance_arr(Z, W),
                               atol=1e-12)


# -- maps ----------------------------------------------------------------------

def test_evaluate_examples():
    assert close(evaluate(Z2, PointP1(1, 1)), PointP1(1, 1))
    assert close(evaluate(Z2, PointP1(2, 1)), PointP1(4, 1))
    assert close(evaluate(RationalMap.quadratic(1), PointP1(1j, 1)), PointP1(0, 1))


def test_evaluate_degenerate_raises():
    f = RationalMap(2, (0, 1, 0), (0, 0, 1))  # (XY, X^2) vanish at [0:1]
    with pytest.raises(DegenerateEvaluation):
        evaluate(f, PointP1(0, 1))


def test_given_lift_recovers_input_coefficients():
    f = SQ()
    np.testing.assert_allclose(f.lift_coeffs("given"), [[0, 0, 1], [1, 0, 0]])
    np.testing.assert_allclose(np.linalg.norm(f.coeffs), 1.0)


def test_record_round_trip():
    f = parse_map("z^2 + (0.3-0.5i)")
    g = RationalMap.from_record(f.to_record())
    np.testing.assert_allclose(g.lift_coeffs("given"), f.lift_coeffs("given"))
    assert g.digest == f.digest


def test_parse_map_rational():
    f = parse_map("(z^2+1)/(2z)")
    w = lift_eval(f.lift_coeffs("given"), np.array([[3.0, 1.0]]))[0]
    assert w[0] / w[1] == pytest.approx((9 + 1) / 6)


def test_parse_map_rejects_constant():
    with pytest.raises(ValueError):
        parse_map("3")


# -- resultant --------------------------------------------------------------------

def test_resultant_examples():
    assert resultant(SQ(), "given") == pytest.approx(1.0)
    assert resultant(RationalMap(2, (0, 0, 1), (0, 0, 1))) == pytest.approx(0.0)
    assert resultant(SQ()) == pytest.approx(0.25)


def test_dist_to_degenerate_examples():
    assert dist_to_degenerate(SQ()) == pytest.approx(1 / math.sqrt(2))
    assert dist_to_degenerate(RationalMap(2, (0, 0, 1), (0, 0, 1))) == 0.0
    small = [dist_to_degenerate(RationalMap(2, (0, eps, 1), (1, 0, 0))) for eps in (1e-3, 1e-6)]
    assert min(small) > 0.7


@given(st.floats(0.1, 10))
def test_resultant_scales_with_degree(c):
    p = np.array([0.3, -1, 2 + 1j])
    q = np.array([1, 0.5j, 0.2])
    f = RationalMap(2, tuple(p), tuple(q))
    g = RationalMap(2, tuple(c * p), tuple(c * q))
    assert abs(resultant(g, "given")) == pytest.approx(c ** 4 * abs(resultant(f, "given")),
                                                       rel=1e-9)


def test_min_sphere_norm_examples():
    assert min_sphere_norm(SQ(), lift="given") == pytest.approx(1 / math.sqrt(2), rel=2e-3)
    assert min_sphere_norm(RationalMap(2, (0, 0, 1), (0, 1, 0)), lift="given") <= 1e-6
    assert min_sphere_norm(RationalMap(2, (1, 0, 1), (0, 1, 0)), lift="given") > 0.1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_min_norm_certificate_below_estimate(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=6) + 1j * rng.normal(size=6)
    f = RationalMap(2, tuple(c[:3]), tuple(c[3:]))
    assert min_norm_lower_bound(dist_to_degenerate(f), 2) <= min_sphere_norm(f) / 0.999 + 1e-12


# -- pre-images --------------------------------------------------------------------

def test_preimage_examples():
    pre = preimages(Z2, PointP1(1, 1))
    assert sorted(m for _, m in pre) == [1, 1]
    pts = [p.affine for p, _ in pre]
    assert sorted(round(z.real) for z in pts) == [-1, 1]
    for target in (PointP1(0, 1), PointP1(1, 0)):
        pre = preimages(Z2, target)
        assert len(pre) == 1 and pre.total_multiplicity == 2
        assert close(pre.points[0][0], target, 1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_preimages_map_back_and_conserve_multiplicity(seed, d):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=2 * d + 2) + 1j * rng.normal(size=2 * d + 2)
    f = RationalMap(d, tuple(c[:d + 1]), tuple(c[d + 1:]))
    x = normalize_rows(rng.normal(size=(1, 2)) + 1j * rng.normal(size=(1, 2)))
    roots = preimage_roots(f.coeffs, x, newton=2)[0]
    assert roots.shape == (d, 2)
    images = normalize_rows(lift_eval(f.coeffs, roots))
    assert np.all(fs_distance_arr(images, x) <= 1e-7)
    assert preimages(f, PointP1.from_vec(x[0])).total_multiplicity == d


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conjugation_is_chart_independent(seed):
    rng = np.random.default_rng(seed)
    U = random_unitary(rng)
    f = RationalMap.quadratic(complex(*rng.normal(size=2)))
    g = conjugate(f, U)
    Z = normalize_rows(rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2)))
    lhs = normalize_rows(lift_eval(g.coeffs, Z @ U.T))
    rhs = normalize_rows(lift_eval(f.coeffs, Z) @ U.T)
    assert np.all(fs_distance_arr(lhs, rhs) <= 1e-9)
    assert abs(resultant(g)) > 0
