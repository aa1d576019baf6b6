"""Statistical harnesses: stationarity, equidistribution, correlation decay and
central limit theorems for the skew product and the pre-image chain."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as sps

from . import green
from .ensemble import Ensemble, MapSequence, SequenceBatch, derive_seed
from .errors import NoiseFloor, VarianceZero
from .measure import (EmpiricalMeasure, backward_sample_fiber, estimate_nu, fiber_orbits,
                      generic_start, measure_discrepancy, run_chains)
from .parallel import BLOCK, map_blocks
from .transfer import Observable, envelope_slope, markov_values, sigma_squared

# stream labels for derived seeds
NU_SEED, CENTER_SEED, RUN_SEED, GORDIN_SEED = 11, 12, 13, 14


def _fmt(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else float(x)


# ----------------------------------------------------------------------------
# stationarity
# ----------------------------------------------------------------------------

@dataclass
class StationarityReport:
    names: List[str]
    differences: List[float]
    se: List[float]
    passed: List[bool]
    samples: int
    chains: int

    @property
    def all_passed(self) -> bool:
        return all(self.passed)

    def to_dict(self) -> dict:
        return {"samples": self.samples, "chains": self.chains, "all_passed": self.all_passed,
                "observables": [{"name": n, "difference": d, "se": s, "passed": p}
                                for n, d, s, p in zip(self.names, self.differences,
                                                      self.se, self.passed)]}


def stationarity_test(e: Ensemble, panel: Sequence[Observable], chains: int = 100,
                      length: int = 2000, burn_in: int = 200, seed: int = 0,
                      nu: Optional[EmpiricalMeasure] = None, samples: int = 256,
                      k_se: float = 3.0) -> StationarityReport:
    """``|<nu, P psi> - <nu, psi>| <= k_se * SE`` for each panel observable.

    SEs use per-chain means of ``P psi - psi``.
    """
    nu = nu if nu is not None else estimate_nu(e, chains, length, burn_in, seed)
    names, diffs, ses, ok = [], [], [], []
    for psi in panel:
        pv, _ = markov_values(e, psi, nu.points, samples, derive_seed(seed, 3))
        m, se = nu.mean_se(pv - psi.evaluate(nu.points))
        names.append(psi.name)
        diffs.append(m)
        ses.append(se)
        ok.append(bool(abs(m) <= k_se * se) if se > 0 else abs(m) <= 1e-12)
    return StationarityReport(names, diffs, ses, ok, len(nu), chains)


# ----------------------------------------------------------------------------
# equidistribution
# ----------------------------------------------------------------------------

@dataclass
class CircleReport:
    """Angle KS distance vs uniform and radial concentration on ``|z| = 1``."""

    ks: float
    ks_pvalue: float
    radial_fraction: float
    radial_tol: float
    samples: int

    def to_dict(self):
        return dict(self.__dict__)


def circle_diagnostics(m: EmpiricalMeasure, radial_tol: float = 2.0 ** -10) -> CircleReport:
    """Diagnostics against the uniform measure on the unit circle (the ``z^2`` case)."""
    x, y = m.points[:, 0], m.points[:, 1]
    ang = np.angle(x * np.conj(y))
    r = np.abs(x) / np.maximum(np.abs(y), 1e-300)
    res = sps.kstest((ang + np.pi) / (2 * np.pi), "uniform")
    frac = float(np.mean(np.abs(r - 1) <= radial_tol))
    return CircleReport(float(res.statistic), float(res.pvalue), frac, radial_tol, len(m))


@dataclass
class EquidistributionReport:
    discrepancy: float
    per_observable: Dict[str, float]
    mass_info: dict
    fiber_samples: int
    fiber_depth: int
    resolution: int
    green_depth: int

    def to_dict(self):
        return dict(self.__dict__)


def potential_vs_fiber(s: MapSequence, panel: Sequence[Observable], resolution: int = 512,
                       n: int = 25, samples: int = 20000, depth: int = 25,
                       seed: int = 0, half_width: float = 1.5):
    """Panel discrepancy between ``omega + dd^c G`` and the backward fiber sample."""
    m_pot, info = green.equilibrium_measure(s, resolution, n, half_width)
    m_fib = backward_sample_fiber(s, depth, None, samples, seed)
    disc = measure_discrepancy(m_pot, m_fib, panel)
    rep = EquidistributionReport(disc.sup, disc.per_observable, dict(info.__dict__), samples,
                                 depth, resolution, n)
    return rep, m_pot, m_fib


# ----------------------------------------------------------------------------
# correlations along the skew product
# ----------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    ns: List[int]
    values: List[float]
    se: List[float]
    censored: List[bool]
    rate: Optional[float]
    intercept: Optional[float]
    noise_floor_index: Optional[int]
    envelope_slope: float
    chains: int

    def to_dict(self):
        return {"entries": [{"n": n, "C": c, "se": s, "censored": k}
                            for n, c, s, k in zip(self.ns, self.values, self.se,
                                                  self.censored)],
                "rate": self.rate, "intercept": self.intercept,
                "noise_floor_index": self.noise_floor_index,
                "envelope_slope": self.envelope_slope, "chains": self.chains}

    def to_csv(self) -> str:
        rows = ["n,C,se,censored"]
        rows += [f"{n},{c!r},{s!r},{int(k)}" for n, c, s, k in
                 zip(self.ns, self.values, self.se, self.censored)]
        return "\n".join(rows) + "\n"


def _orbit_block(e, seed, n_max, n_pre, wanted, fns, a, b):
    """Evaluate ``fns[j]`` at time ``j`` (for ``j`` in ``wanted``) along stationary orbits."""
    ids = np.arange(a, b)
    batch = SequenceBatch(e, seed, ids)
    X_top = np.stack([generic_start(seed, int(c)) for c in ids])
    out = {}

    def observer(j, X):
        if j in wanted:
            out[j] = fns(j, X)

    fiber_orbits(batch, n_max, n_pre, X_top, observer)
    return out


def correlation(e: Ensemble, phi: Observable, psi: Observable, n_list: Sequence[int],
                chains: int = 10000, seed: int = 0, n_pre: int = 25,
                workers: int = 1) -> CorrelationReport:
    """``C_n = <mu, (phi o tau^n) psi> - <mu, phi><mu, psi>`` from stationary orbits.

    Entries with ``|C_n| <= 3 SE`` are censored and left out of the fit of
    ``log|C_n|`` against ``n``.  Raises `NoiseFloor` if all are censored.
    """
    n_list = sorted(set(int(n) for n in n_list))
    n_max = max(n_list)
    run_seed = derive_seed(seed, RUN_SEED)
    wanted = set(n_list) | {0}

    def fns(j, X):
        r = {}
        if j == 0:
            r["psi"] = psi.evaluate(X)
        if j in n_list:
            r["phi"] = phi.evaluate(X)
        return r

    blocks = map_blocks(lambda a, b: _orbit_block(e, run_seed, n_max, n_pre, wanted, fns, a, b),
                        chains, BLOCK, workers)
    psi0 = np.concatenate([blk[0]["psi"] for blk in blocks])
    vals, ses, cens = [], [], []
    for n in n_list:
        phin = np.concatenate([blk[n]["phi"] for blk in blocks])
        prod = (phin - phin.mean()) * (psi0 - psi0.mean())
        c = float(prod.sum() / (len(prod) - 1))
        se = float(prod.std(ddof=1) / math.sqrt(len(prod)))
        vals.append(c)
        ses.append(se)
        cens.append(not abs(c) > 3 * se)
    keep = [i for i, k in enumerate(cens) if not k]
    rate = intercept = None
    if len(keep) >= 2:
        rate, intercept = (float(v) for v in np.polyfit([n_list[i] for i in keep],
                                                        [math.log(abs(vals[i])) for i in keep],
                                                        1))
    first = next((n_list[i] for i, k in enumerate(cens) if k), None)
    rep = CorrelationReport(n_list, vals, ses, cens, rate, intercept, first,
                            envelope_slope(psi, e.d), chains)
    if not keep:
        raise NoiseFloor("every correlation entry is within 3 SE of zero", rep)
    return rep


# ----------------------------------------------------------------------------
# central limit theorems
# ----------------------------------------------------------------------------

@dataclass
class CLTReport:
    kind: str
    n: int
    chains: int
    sums: np.ndarray = field(repr=False)
    sigma2: float
    sigma2_se: float
    sigma2_source: str
    batch_variance: float
    batch_variance_se: float
    center: float
    center_se: float
    mean: float
    mean_se: float
    ks: Optional[float]
    ks_pvalue: Optional[float]
    degenerate: bool
    histogram: tuple = field(repr=False, default=())
    qq: tuple = field(repr=False, default=())

    def to_dict(self) -> dict:
        keys = ["kind", "n", "chains", "sigma2", "sigma2_se", "sigma2_source", "batch_variance",
                "batch_variance_se", "center", "center_se", "mean", "mean_se", "ks",
                "ks_pvalue", "degenerate"]
        d = {k: getattr(self, k) for k in keys}
        return {k: (_fmt(v) if isinstance(v, float) else v) for k, v in d.items()}

    def csvs(self) -> Dict[str, str]:
        out = {"sums.csv": "chain,normalized_sum\n" + "".join(
            f"{i},{float(v)!r}\n" for i, v in enumerate(self.sums))}
        if self.histogram:
            edges, counts = self.histogram
            out["histogram.csv"] = "left,right,count\n" + "".join(
                f"{float(a)!r},{float(b)!r},{int(c)}\n"
                for a, b, c in zip(edges[:-1], edges[1:], counts))
        if self.qq:
            th, em = self.qq
            out["qq.csv"] = "theoretical,empirical\n" + "".join(
                f"{float(a)!r},{float(b)!r}\n" for a, b in zip(th, em))
        return out


def center_estimate(e: Ensemble, psi: Observable, target_se: float, seed: int,
                    chains: int = 1000, length: int = 300, burn_in: int = 200,
                    max_chains: int = 100_000):
    """``<nu, psi>`` from independent chains, enlarged until its SE is below ``target_se``."""
    while True:
        nu = estimate_nu(e, chains, length, burn_in, derive_seed(seed, chains))
        m, se = nu.mean_se(psi.evaluate(nu.points))
        se = 0.0 if math.isnan(se) else se
        if se <= target_se or chains >= max_chains:
            return m, se
        grow = (se / max(target_se, 1e-300)) ** 2 * 1.2
        chains = int(min(max_chains, math.ceil(chains * grow)))


def _finish(kind, sums, n, sigma2, sigma2_se, source, center, center_se):
    N = len(sums)
    mean = float(sums.mean())
    sq = sums ** 2
    bv = float(sq.mean())
    bv_se = float(sq.std(ddof=1) / math.sqrt(N)) if N > 1 else math.nan
    degenerate = not sigma2 > 0
    ks = pv = None
    hist = qq = ()
    if not degenerate:
        sd = math.sqrt(sigma2)
        res = sps.kstest(sums, "norm", args=(0.0, sd))
        ks, pv = float(res.statistic), float(res.pvalue)
        counts, edges = np.histogram(sums, bins=50)
        hist = (edges, counts)
        probs = (np.arange(N) + 0.5) / N
        qq = (sps.norm.ppf(probs, scale=sd), np.sort(sums))
    mean_se = math.sqrt(sigma2 / N) if sigma2 > 0 else 0.0
    return CLTReport(kind, n, N, sums, float(sigma2), float(sigma2_se), source, bv, bv_se,
                     float(center), float(center_se), mean, mean_se, ks, pv, degenerate,
                     hist, qq)


def _variance(e, psi, sigma2, seed, J, paths):
    """``sigma^2`` from the Gordin series unless given; ``VarianceZero`` handled by caller."""
    if sigma2 is not None:
        return float(sigma2), 0.0, "given", False
    nu = estimate_nu(e, 200, 300, 200, derive_seed(seed, NU_SEED))
    rep = sigma_squared(e, psi, J, nu, paths=paths, seed=derive_seed(seed, GORDIN_SEED))
    return rep.sigma2, rep.se, "gordin", rep.coboundary


# centering SE target as a fraction of sigma/sqrt(n); a shift of c*sigma in the
# normalized sums moves the KS distance by about 0.4*c
CENTER_FACTOR = 0.02


def _clt(kind, e, psi, n, chains, seed, sigma2, J, paths, workers, block_fn):
    s2, s2_se, source, cob = _variance(e, psi, sigma2, seed, J, paths)
    sd = math.sqrt(max(s2, 0.0))
    target = CENTER_FACTOR * sd / math.sqrt(n) if sd > 0 else 1e-12
    center, center_se = center_estimate(e, psi, target, derive_seed(seed, CENTER_SEED))
    run_seed = derive_seed(seed, RUN_SEED)
    parts = map_blocks(lambda a, b: block_fn(run_seed, center, a, b), chains, BLOCK, workers)
    sums = np.concatenate(parts) / math.sqrt(n)
    if cob or not s2 > 0:
        rep = _finish(kind, sums, n, 0.0, s2_se, source, center, center_se)
        raise VarianceZero(f"{psi.name}: limiting variance is zero (coboundary case)", rep)
    return _finish(kind, sums, n, s2, s2_se, source, center, center_se)


def skew_clt(e: Ensemble, psi: Observable, n: int = 1000, chains: int = 10000, seed: int = 0,
             sigma2: Optional[float] = None, J: int = 8, paths: int = 512, n_pre: int = 25,
             workers: int = 1) -> CLTReport:
    """Normalized Birkhoff sums ``n^-1/2 sum_{j<n} psi(F_{lambda,j} x)`` with ``x ~ mu_lambda``.

    Each chain has its own sequence ``lambda``; orbits are generated by
    `fiber_orbits`.  The KS test uses ``N(0, sigma)`` with ``sigma^2`` fixed
    before the sums are drawn (Gordin estimate unless ``sigma2`` is given).
    """
    def block(run_seed, center, a, b):
        ids = np.arange(a, b)
        acc = np.zeros(len(ids))

        def observer(j, X):
            if j < n:
                acc[:] += psi.evaluate(X) - center

        batch = SequenceBatch(e, run_seed, ids)
        X_top = np.stack([generic_start(run_seed, int(c)) for c in ids])
        fiber_orbits(batch, n, n_pre, X_top, observer)
        return acc

    return _clt("skew", e, psi, n, chains, seed, sigma2, J, paths, workers, block)


def markov_clt(e: Ensemble, psi: Observable, n: int = 1000, chains: int = 10000,
               seed: int = 0, sigma2: Optional[float] = None, J: int = 8, paths: int = 512,
               burn_in: int = 200, workers: int = 1) -> CLTReport:
    """Normalized sums ``n^-1/2 sum_{j<n} psi(Z_j)`` over burned-in pre-image chains."""
    def block(run_seed, center, a, b):
        ids = np.arange(a, b)
        X0 = np.stack([generic_start(run_seed, int(c)) for c in ids])
        acc = np.zeros(len(ids))

        def observer(j, X):
            # X is the chain state Z_j; sums cover Z_burn_in .. Z_{burn_in+n-1}
            if burn_in <= j < burn_in + n:
                acc[:] += psi.evaluate(X) - center

        observer(0, X0)
        run_chains(e, X0, burn_in + n - 1, run_seed, ids, observer=observer)
        return acc

    return _clt("markov", e, psi, n, chains, seed, sigma2, J, paths, workers, block)


# ----------------------------------------------------------------------------
# variance scaling
# ----------------------------------------------------------------------------

@dataclass
class VarianceScalingReport:
    names: List[str]
    n: int
    var_n: List[float]
    var_2n: List[float]
    rel_change: List[float]
    passed: List[bool]
    tol: float
    chains: int

    @property
    def all_passed(self) -> bool:
        return all(self.passed)

    def to_dict(self) -> dict:
        return {"n": self.n, "chains": self.chains, "tol": self.tol,
                "all_passed": self.all_passed,
                "observables": [{"name": a, "var_n": b, "var_2n": c, "rel_change": d,
                                 "passed": p} for a, b, c, d, p in
                                zip(self.names, self.var_n, self.var_2n, self.rel_change,
                                    self.passed)]}


def variance_scaling(e: Ensemble, panel: Sequence[Observable], n: int = 256,
                     chains: int = 2000, seed: int = 0, burn_in: int = 200,
                     tol: float = 0.15, workers: int = 1) -> VarianceScalingReport:
    """``Var(S_n)/n`` against ``Var(S_2n)/n`` along burned-in pre-image chains.

    Both sums use the same chains (``S_n`` is a prefix of ``S_2n``) and are
    centered by the pooled sample mean of each observable.  Observables whose
    variances are both below ``1e-8`` (constant on the support of ``nu``)
    count as passed.
    """
    panel = list(panel)
    run_seed = derive_seed(seed, RUN_SEED)

    def block(a, b):
        ids = np.arange(a, b)
        X0 = np.stack([generic_start(run_seed, int(c)) for c in ids])
        acc = np.zeros((2, len(panel), len(ids)))

        def observer(j, X):
            k = j - burn_in
            if 0 <= k < 2 * n:
                v = np.stack([psi.evaluate(X) for psi in panel])
                acc[1] += v
                if k < n:
                    acc[0] += v

        observer(0, X0)
        run_chains(e, X0, burn_in + 2 * n - 1, run_seed, ids, observer=observer)
        return acc

    S = np.concatenate(map_blocks(block, chains, BLOCK, workers), axis=2)
    mean = S[1].sum(axis=1) / (2 * n * chains)
    v1 = ((S[0] - n * mean[:, None]) ** 2).mean(axis=1) / n
    v2 = ((S[1] - 2 * n * mean[:, None]) ** 2).mean(axis=1) / (2 * n)
    rel = np.abs(v2 - v1) / np.maximum(v1, 1e-300)
    ok = (rel < tol) | (np.maximum(v1, v2) <= 1e-8)
    return VarianceScalingReport([p.name for p in panel], n, v1.tolist(), v2.tolist(),
                                 rel.tolist(), ok.tolist(), tol, chains)
