"""One test per acceptance criterion; each prints a PASS/FAIL line.

The checks live in `randgreen.acceptance` so that ``randgreen verify``
runs exactly the same code.
"""
import pytest

from randgreen import acceptance
from randgreen.parallel import default_workers


def check(fn, log, **kw):
    r = fn(**kw)
    print(r.line())
    log(r.line())
    assert r.passed, r.line()


def test_criterion_01_green_oracle(acceptance_log):
    check(acceptance.c1_green_oracle, acceptance_log)


def test_criterion_02_invariance(acceptance_log):
    check(acceptance.c2_invariance, acceptance_log)


def test_criterion_03_adjunction(acceptance_log):
    check(acceptance.c3_adjunction, acceptance_log)


def test_criterion_04_equidistribution(acceptance_log):
    check(acceptance.c4_equidistribution, acceptance_log)


def test_criterion_05_potential_vs_fiber(acceptance_log):
    check(acceptance.c5_potential_vs_fiber, acceptance_log)


def test_criterion_06_stationarity(acceptance_log):
    check(acceptance.c6_stationarity, acceptance_log)


def test_criterion_07_decay_rate(acceptance_log):
    check(acceptance.c7_decay, acceptance_log)


@pytest.mark.slow
def test_criterion_08_clt(acceptance_log):
    check(acceptance.c8_clt, acceptance_log, workers=default_workers())


def test_criterion_09_tail(acceptance_log):
    check(acceptance.c9_tail, acceptance_log)


def test_criterion_10_determinism(acceptance_log):
    check(acceptance.c10_determinism, acceptance_log, workers=2)
