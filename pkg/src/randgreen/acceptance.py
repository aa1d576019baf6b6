"""Acceptance suite shared by ``randgreen verify`` and the test-suite.

Each check returns a `Result`; the wall-clock limit is part of the check.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from . import green, measure, stats, transfer
from .ensemble import CoefficientBall, Dirac, FiniteMixture, MapSequence, tail_distance_check
from .errors import FitUnreliable
from .proj import RationalMap, normalize_rows


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _z2():
    return Dirac(RationalMap.quadratic(0))


def _mix(c):
    return FiniteMixture.uniform([RationalMap.quadratic(0), RationalMap.quadratic(c)])


def _random_points(rng, n):
    return normalize_rows(rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2)))


def _timed(number, name, limit, fn) -> Result:
    t0 = time.perf_counter()
    ok, detail = fn()
    dt = time.perf_counter() - t0
    if dt > limit:
        ok, detail = False, f"{detail}; exceeded {limit:g}s"
    return Result(number, name, bool(ok), detail, dt)


def c1_green_oracle() -> Result:
    def body():
        Z = _random_points(np.random.default_rng(1), 100)
        s = MapSequence(_z2(), 0)
        G = green.green_values(s, Z, 30, lift="given")
        err = float(np.max(np.abs(G - np.log(np.abs(Z).max(axis=1)))))
        return err <= 1e-6, f"max |G - log max(|x|,|y|)| = {err:.2e} (tol 1e-6)"
    return _timed(1, "z^2 Green oracle", 1.0, body)


def c2_invariance() -> Result:
    def body():
        rng = np.random.default_rng(2)
        worst = {}
        ensembles = {"dirac": Dirac(RationalMap.quadratic(-1)), "mixture": _mix(-1),
                     "ball": CoefficientBall(RationalMap.quadratic(0), 0.05)}
        for name, e in ensembles.items():
            r = 0.0
            for k in range(100):
                s = MapSequence(e, 1000 + k)
                r = max(r, green.invariance_residual(s, _random_points(rng, 1), 20))
            worst[name] = r
        ok = max(worst.values()) <= 1e-9
        return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-9)"
    return _timed(2, "exact invariance", 10.0, body)


def c3_adjunction() -> Result:
    def body():
        rng = np.random.default_rng(3)
        panel = transfer.default_panel()
        err = 0.0
        for _ in range(100):
            p = rng.normal(size=3) + 1j * rng.normal(size=3)
            q = rng.normal(size=3) + 1j * rng.normal(size=3)
            f = RationalMap(2, tuple(p), tuple(q))
            psi = panel[rng.integers(len(panel))]
            x = _random_points(rng, 1)
            lhs = transfer.transfer_values(f.coeffs, transfer.compose(psi, f), x)[0]
            err = max(err, abs(lhs - psi.evaluate(x)[0]))
        return err <= 1e-9, f"max |L_f(psi o f)(x) - psi(x)| = {err:.2e} (tol 1e-9)"
    return _timed(3, "exact adjunction", 5.0, body)


def c4_equidistribution() -> Result:
    def body():
        s = MapSequence(_z2(), 0)
        m = measure.backward_sample_fiber(s, 12, None, 10_000, seed=4)
        rep = stats.circle_diagnostics(m, 2.0 ** -10)
        ok = rep.ks <= 0.02 and rep.radial_fraction >= 0.99
        return ok, (f"angle KS {rep.ks:.4f} (tol 0.02), radial fraction "
                    f"{rep.radial_fraction:.4f} (min 0.99)")
    return _timed(4, "equidistribution", 30.0, body)


def c5_potential_vs_fiber() -> Result:
    def body():
        panel = transfer.default_panel()
        parts, ok = [], True
        for name, e in (("z^2", _z2()), ("{z^2, z^2-0.1}", _mix(-0.1))):
            rep, _, _ = stats.potential_vs_fiber(MapSequence(e, 5), panel, 512, 25,
                                                 samples=20_000, depth=25, seed=5)
            ok &= rep.discrepancy <= 0.03
            parts.append(f"{name} {rep.discrepancy:.4f} (mass defect "
                         f"{rep.mass_info['defect']:.1e})")
        return ok, "panel discrepancy " + ", ".join(parts) + " (tol 0.03)"
    return _timed(5, "potential/measure consistency", 120.0, body)


def c6_stationarity() -> Result:
    def body():
        rep = stats.stationarity_test(_mix(-1), transfer.default_panel(), 100, 2000, 200, 6)
        z = [abs(d) / s for d, s in zip(rep.differences, rep.se)]
        return rep.all_passed, (f"{sum(rep.passed)}/{len(rep.passed)} observables within 3 SE "
                                f"(max |diff|/SE {max(z):.2f})")
    return _timed(6, "stationarity", 60.0, body)


def c7_decay() -> Result:
    def body():
        psi = transfer.moment("re_xy")
        target = -0.25 * math.log(2)
        ok, parts = True, []
        for name, e in (("z^2", _z2()), ("{z^2, z^2-0.1}", _mix(-0.1))):
            try:
                rep = transfer.decay_norm(MapSequence(e, 7), e, psi, range(2, 11), 4000, 7)
                good = rep.slope is not None and rep.slope <= target
                ok &= good
                parts.append(f"{name} slope {rep.slope}")
            except FitUnreliable as exc:
                ok = False
                r = exc.report
                parts.append(f"{name} FitUnreliable: max norm {max(r.norms):.1e} at or below "
                             f"noise floor for n={r.ns[0]}..{r.ns[-1]}")
        return ok, "; ".join(parts) + f" (need slope <= {target:.4f} above noise floor)"
    return _timed(7, "decay rate", 120.0, body)


def c8_clt(workers: int = 1) -> Result:
    def body():
        e = _z2()
        psi = transfer.moment("re_xy")
        parts, ok = [], True
        for kind, fn in (("markov", stats.markov_clt), ("skew", stats.skew_clt)):
            rep = fn(e, psi, 1000, 10_000, seed=8, workers=workers)
            rel = abs(rep.sigma2 - rep.batch_variance) / rep.batch_variance
            ok &= rep.ks <= 0.02 and rel <= 0.10
            parts.append(f"{kind} KS {rep.ks:.4f} sigma2 {rep.sigma2:.4f} batch "
                         f"{rep.batch_variance:.4f} ({100 * rel:.1f}%)")
        g0 = transfer.linear_combination([(1.0, transfer.moment("re_x2y2")), (1.0, psi)])
        nu = measure.estimate_nu(e, 200, 300, 200, seed=88)
        s2, _ = transfer.coboundary_variance(e, g0, nu)
        rep = stats.markov_clt(e, transfer.coboundary(e, g0), 1000, 10_000, seed=9,
                               sigma2=s2, workers=workers)
        ok &= rep.ks <= 0.02
        parts.append(f"coboundary KS {rep.ks:.4f} vs sigma2 {s2:.4f}")
        return ok, "; ".join(parts) + " (KS tol 0.02, variance tol 10%)"
    return _timed(8, "central limit theorems", 300.0, body)


def c9_tail() -> Result:
    def body():
        e = _mix(-1)
        analytic = math.ceil(-math.log(e.delta_min()) / 0.1)
        rep = tail_distance_check(MapSequence(e, 7), 0.1, 50)
        others = [tail_distance_check(MapSequence(e, k), 0.1, 50).j0 for k in range(20)]
        ok = rep.j0 == analytic and rep.j0_guaranteed == analytic and max(others) <= analytic
        return ok, (f"j0 {rep.j0}, guaranteed {rep.j0_guaranteed}, analytic {analytic}; "
                    f"realized j0 over 20 seeds <= {max(others)}")
    return _timed(9, "tail diagnostic", 5.0, body)


DETERMINISM_CONFIG = """
seed = 10

[ensemble]
type = "mixture"
maps = ["z^2", "z^2-1"]

[sequence]
n = 16

[green-eval]
points = ["0.5+0.5i", "2", "inf"]
n = 20

[potential-grid]
resolution = 32
n = 12

[measure-sample]
depth = 8
count = 200

[equidist-test]
resolution = 64
n = 12
samples = 500
depth = 10
tolerance = 1.0

[markov-sample]
length = 100
burn_in = 10

[stationarity-test]
chains = 8
length = 60
burn_in = 20

[decay]
observable = "abs_x2"
n_list = [1, 2, 3]
samples = 300
n_pre = 10

[gordin]
observable = "abs_x2"
J = 3
nu_chains = 10
nu_length = 60
nu_burn_in = 30
tail_tol = 10.0

[correlation]
phi = "abs_x2"
psi = "abs_x2"
n_list = [0, 1, 2]
chains = 500
n_pre = 10

[clt-skew]
observable = "abs_x2"
n = 20
chains = 200
J = 3
n_pre = 10
sigma2 = 0.01

[clt-markov]
observable = "abs_x2"
n = 20
chains = 200
J = 3
burn_in = 20
sigma2 = 0.01

[holder-probe]
scales = [0.01, 0.001]
pairs = 20
n = 20

[tail-check]
epsilon = 0.1
n = 30
"""


def c10_determinism(workers: int = 1) -> Result:
    def body():
        from .cli import COMMANDS, run
        from .config import parse_config
        cfg = parse_config(DETERMINISM_CONFIG)
        bad, errors = [], []
        with tempfile.TemporaryDirectory() as tmp:
            for cmd in COMMANDS:
                digests = []
                for rep in range(2):
                    try:
                        m = run(cmd, cfg, Path(tmp) / f"{cmd}-{rep}", workers if rep else 1)
                        digests.append(m["digest"])
                    except Exception as exc:  # noqa: BLE001 - reported, not hidden
                        errors.append(f"{cmd}: {type(exc).__name__}")
                        break
                if len(digests) == 2 and digests[0] != digests[1]:
                    bad.append(cmd)
        ok = not bad and not errors
        detail = f"{len(COMMANDS) - len(bad) - len(errors)}/{len(COMMANDS)} subcommands reproduce"
        if bad:
            detail += f"; differing: {', '.join(bad)}"
        if errors:
            detail += f"; errors: {', '.join(errors)}"
        return ok, detail
    return _timed(10, "determinism", 120.0, body)


CHECKS: List[Callable[..., Result]] = [
    c1_green_oracle, c2_invariance, c3_adjunction, c4_equidistribution,
    c5_potential_vs_fiber, c6_stationarity, c7_decay, c8_clt, c9_tail, c10_determinism,
]


def run_all(workers: int = 1, log=print) -> List[Result]:
    results = []
    for check in CHECKS:
        r = check(workers) if check in (c8_clt, c10_determinism) else check()
        log(r.line())
        results.append(r)
    return results
