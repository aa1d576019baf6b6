"""Observables, transfer operators along fibers, the averaged Markov operator,
decay norms, the Gordin series and the limiting variance."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .ensemble import (ATOM, ROOT, SAMPLE, Dirac, Ensemble, MapSequence, SequenceBatch,
                       derive_seed, hash_keys, uniforms)
from .errors import BudgetExceeded, FitUnreliable, SingularHit, TailTooFat
from .measure import EmpiricalMeasure, backward_sample_fiber, estimate_nu, generic_start
from .proj import (PointP1, RationalMap, fs_distance_arr, lift_eval, normalize_rows,
                   preimage_roots)

EXACT_BUDGET = 2 ** 20   # leaves per evaluation point for exact trees
WORK_BUDGET = 2 ** 24    # total tree nodes across all evaluation points
LEAF_CHUNK = 2 ** 20     # tree nodes held in memory at once
DSH_CLIP = 30.0


def _as_rows(z):
    if isinstance(z, PointP1):
        return z.vec[None, :], True
    z = np.asarray(z, dtype=complex)
    if z.ndim == 1:
        return normalize_rows(z[None, :]), True
    return normalize_rows(z), False


@dataclass(frozen=True, eq=False)
class Observable:
    """Real function on P^1 evaluated on unit representatives.

    ``kind`` is ``"smooth"``, ``"holder"`` or ``"dsh"``; ``beta`` the Hoelder
    exponent (1 for smooth); ``norm_bound`` a bound on ``sup|psi| + Hoelder
    constant`` (C^beta classes, distances in FS metric) or on ``||psi||_{L^1} +
    mass of dd^c psi`` (dsh).  ``math.inf`` means no bound is known.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    kind: str = "smooth"
    beta: float = 1.0
    norm_bound: float = math.inf
    clip: Optional[float] = None
    spec: Optional[dict] = None

    def evaluate(self, z):
        Z, scalar = _as_rows(z)
        v = np.asarray(self.fn(Z), dtype=float)
        return float(v[0]) if scalar else v

    __call__ = evaluate

    @property
    def sup_bound(self) -> float:
        return self.spec.get("sup", math.inf) if self.spec else math.inf

    def __repr__(self):
        return f"Observable({self.name!r}, {self.kind})"


# ----------------------------------------------------------------------------
# built-in observables
# ----------------------------------------------------------------------------

def _xy(Z):
    return Z[:, 0] * np.conj(Z[:, 1])


_MOMENTS = {
    "re_xy": (lambda Z: _xy(Z).real, 0.5, 1.0),
    "im_xy": (lambda Z: _xy(Z).imag, 0.5, 1.0),
    "abs_x2": (lambda Z: np.abs(Z[:, 0]) ** 2, 1.0, 1.0),
    "re_x2y2": (lambda Z: (_xy(Z) ** 2).real, 0.25, 1.0),
    "im_x2y2": (lambda Z: (_xy(Z) ** 2).imag, 0.25, 1.0),
}


def moment(which: str, power: int = 1) -> Observable:
    """Coordinate moment ``Re(x ybar)``, ``Im(x ybar)``, ``|x|^2`` (over ``||Z||^2``),
    ``Re/Im(x^2 ybar^2)`` (over ``||Z||^4``), raised to ``power``.

    All base moments are 1-Lipschitz in the FS distance (they are affine in
    the Hopf image, whose chordal distance is ``2 sin d_FS``).
    """
    if which not in _MOMENTS:
        raise ValueError(f"unknown moment {which!r}; choose from {sorted(_MOMENTS)}")
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    base, sup, lip = _MOMENTS[which]
    if power == 1:
        fn = base
        name = which
    else:
        fn = lambda Z, base=base: base(Z) ** 2  # noqa: E731
        name = f"{which}^2"
        lip = 2 * sup * lip
        sup = sup ** 2
    return Observable(name, fn, "smooth", 1.0, sup + lip,
                      spec={"type": "moment", "which": which, "power": power, "sup": sup})


def fs_distance_to(p, beta: float = 0.5) -> Observable:
    """``d_FS(., p)^beta``, Hoelder of exponent ``beta`` with constant 1."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    p = p if isinstance(p, PointP1) else PointP1.from_affine(complex(p))
    pv = p.vec
    sup = (math.pi / 2) ** beta
    fn = lambda Z: fs_distance_arr(Z, pv[None, :]) ** beta  # noqa: E731
    return Observable(f"dfs^{beta:g}({_fmt_point(p)})", fn, "holder", beta, 1.0 + sup,
                      spec={"type": "fs_distance", "point": _fmt_point(p), "beta": beta,
                            "sup": sup})


def _fmt_point(p: PointP1) -> str:
    if abs(p.y) < 1e-15:
        return "inf"
    z = p.affine
    return f"{z.real:g}{z.imag:+g}i"


def _root_vector(r) -> np.ndarray:
    """Unit linear form vanishing at the affine point ``r`` (``inf`` allowed)."""
    if isinstance(r, str) and r.strip() == "inf":
        v = np.array([0.0, 1.0], dtype=complex)
    else:
        v = np.array([1.0, -complex(_parse_complex(r))], dtype=complex)
    return v / np.linalg.norm(v)


def dsh_log_pair(r1, r2, clip: float = DSH_CLIP) -> Observable:
    """``log(|l1(Z)|/||Z||) - log(|l2(Z)|/||Z||)`` with ``l_i`` vanishing at ``r_i``.

    Each term is clipped below at ``-clip``.  The norm bound is
    ``L^1 norm (<= 1/2 + 1/2) + mass of dd^c psi (1)``.
    """
    l1, l2 = _root_vector(r1), _root_vector(r2)

    name = f"dsh({r1}|{r2})"

    def fn(Z):
        # |l(Z)| = sin d_FS(Z, zero of l) for unit Z and unit l
        a = np.log(np.maximum(np.abs(Z @ l1), 1e-300))
        b = np.log(np.maximum(np.abs(Z @ l2), 1e-300))
        if np.any(a < -clip) or np.any(b < -clip):
            warnings.warn(f"{name}: evaluated at a singularity; clip level used",
                          SingularHit, stacklevel=3)
        return np.maximum(a, -clip) - np.maximum(b, -clip)

    return Observable(name, fn, "dsh", 1.0, 2.0, clip,
                      spec={"type": "dsh", "zero": str(r1), "pole": str(r2), "clip": clip})


def constant(c: float = 0.0) -> Observable:
    return Observable(f"const({c:g})", lambda Z: np.full(len(Z), float(c)), "smooth", 1.0,
                      abs(c), spec={"type": "constant", "value": float(c), "sup": abs(c)})


def default_panel() -> List[Observable]:
    """Twelve observables: eight smooth moments, two Hoelder-1/2 distances, two dsh."""
    panel = [moment(w) for w in ("re_xy", "im_xy", "abs_x2")]
    panel += [moment(w, 2) for w in ("re_xy", "im_xy", "abs_x2")]
    panel += [moment("re_x2y2"), moment("im_x2y2")]
    panel += [fs_distance_to(1.0, 0.5), fs_distance_to(1j, 0.5)]
    panel += [dsh_log_pair(0.5, 2), dsh_log_pair("0.5j", "-2j")]
    return panel


def observable_from_spec(spec: dict) -> Observable:
    kind = spec.get("type")
    if kind == "moment":
        return moment(spec["which"], int(spec.get("power", 1)))
    if kind == "fs_distance":
        pt = spec["point"]
        p = PointP1.infinity() if pt == "inf" else PointP1.from_affine(_parse_complex(pt))
        return fs_distance_to(p, float(spec.get("beta", 0.5)))
    if kind == "dsh":
        return dsh_log_pair(spec["zero"], spec["pole"], float(spec.get("clip", DSH_CLIP)))
    if kind == "constant":
        return constant(float(spec.get("value", 0.0)))
    raise ValueError(f"unknown observable type {kind!r}")


def _parse_complex(s):
    if isinstance(s, (int, float, complex)):
        return s
    s = str(s).strip()
    if s == "inf":
        return s
    return complex(s.replace(" ", "").replace("i", "j"))


def linear_combination(terms, name: Optional[str] = None) -> Observable:
    """``sum a_k psi_k`` for ``terms = [(a_k, psi_k), ...]``."""
    terms = [(float(a), p) for a, p in terms]
    kinds = {p.kind for _, p in terms}
    kind = "dsh" if "dsh" in kinds else ("holder" if "holder" in kinds else "smooth")
    beta = min(p.beta for _, p in terms)
    bound = sum(abs(a) * p.norm_bound for a, p in terms)
    name = name or " + ".join(f"{a:g}*{p.name}" for a, p in terms)
    return Observable(name, lambda Z: sum(a * p.evaluate(Z) for a, p in terms), kind, beta,
                      bound)


def compose(psi: Observable, f: RationalMap) -> Observable:
    """``psi o f``; no norm bound is carried over."""
    C = f.coeffs
    return Observable(f"{psi.name}o[{f.digest[:8]}]",
                      lambda Z: psi.evaluate(normalize_rows(lift_eval(C, Z))),
                      psi.kind, psi.beta, math.inf, psi.clip)


# ----------------------------------------------------------------------------
# transfer operators
# ----------------------------------------------------------------------------

def transfer_values(C, psi: Observable, X) -> np.ndarray:
    """Vectorized ``L_f psi`` at the rows of ``X`` for coefficients ``C``."""
    R = preimage_roots(C, X)
    N, d, _ = R.shape
    return psi.evaluate(R.reshape(N * d, 2)).reshape(N, d).mean(axis=1)


def transfer_apply(f: RationalMap, psi: Observable, x) -> float:
    """``d^-1 sum mult(y) psi(y)`` over the pre-images ``y`` of ``x``."""
    X, _ = _as_rows(x)
    return float(transfer_values(f.coeffs, psi, X)[0])


def _tree_leaves(coeff_list, X):
    """All leaves of the pre-image tree over each row of ``X``: ``(N, d^n, 2)``."""
    N = X.shape[0]
    nodes = X[:, None, :]
    for C in reversed(coeff_list):
        L = nodes.shape[1]
        R = preimage_roots(C, nodes.reshape(N * L, 2))
        nodes = R.reshape(N, L * R.shape[1], 2)
    return nodes


def composed_transfer_values(s: MapSequence, psi: Observable, n: int, X,
                             mode: str = "exact", samples: int = 1000, seed: int = 0,
                             budget: int = EXACT_BUDGET):
    """``L_{n-1} ... L_0 psi`` at each row of ``X``; returns ``(values, se)``.

    ``mode="exact"`` enumerates the full tree (pulling back by ``f_{n-1}``
    first); ``"monte_carlo"`` averages ``psi`` over ``samples`` random
    multiplicity-weighted descents per point; ``"auto"`` picks exact when
    ``d^n <= budget``.
    """
    X = normalize_rows(np.atleast_2d(X))
    N = X.shape[0]
    if n == 0:
        return psi.evaluate(X), np.zeros(N)
    d = s.d
    if mode == "auto":
        mode = "exact" if d ** n <= budget and N * d ** n <= WORK_BUDGET else "monte_carlo"
    coeffs = list(s.coeff_array(n))
    if mode == "exact":
        if d ** n > budget:
            raise BudgetExceeded(f"exact tree needs {d}^{n} leaves > budget {budget}")
        chunk = max(1, LEAF_CHUNK // d ** n)
        out = np.empty(N)
        for a in range(0, N, chunk):
            leaves = _tree_leaves(coeffs, X[a:a + chunk])
            M, L, _ = leaves.shape
            out[a:a + chunk] = psi.evaluate(leaves.reshape(M * L, 2)).reshape(M, L).mean(1)
        return out, np.zeros(N)
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    K = int(samples)
    rows = np.repeat(X, K, axis=0)
    ids = np.arange(N * K)
    base = derive_seed(seed, SAMPLE)
    idx = np.arange(N * K)
    for j in range(n - 1, -1, -1):
        R = preimage_roots(coeffs[j], rows)
        u = uniforms(base, ids, j + s.offset, ROOT)
        rows = R[idx, np.minimum((u * d).astype(np.int64), d - 1)]
    v = psi.evaluate(rows).reshape(N, K)
    se = v.std(axis=1, ddof=1) / math.sqrt(K) if K > 1 else np.full(N, math.nan)
    return v.mean(axis=1), se


def composed_transfer(s: MapSequence, psi: Observable, n: int, x, mode: str = "exact",
                      samples: int = 1000, seed: int = 0, budget: int = EXACT_BUDGET):
    """``(L_{n-1} o ... o L_0 psi)(x)`` and its standard error (0 in exact mode)."""
    X, _ = _as_rows(x)
    v, se = composed_transfer_values(s, psi, n, X, mode, samples, seed, budget)
    return float(v[0]), float(se[0])


def _atoms(e: Ensemble):
    return np.stack([f.coeffs for f in e.atoms]), np.asarray(e.weights, dtype=float)


def markov_values(e: Ensemble, psi: Observable, X, samples: int = 256, seed: int = 0):
    """Vectorized ``P psi`` at the rows of ``X``; returns ``(values, se)``.

    Exact weighted sum over atoms for finite ensembles; otherwise the same
    ``samples`` map draws are used for every point.
    """
    X = normalize_rows(np.atleast_2d(X))
    if e.finite:
        tab, w = _atoms(e)
        vals = sum(wk * transfer_values(C, psi, X) for C, wk in zip(tab, w))
        return vals, np.zeros(X.shape[0])
    base = derive_seed(seed, SAMPLE)
    per = np.stack([transfer_values(e.draw(base, i).coeffs, psi, X) for i in range(samples)])
    se = per.std(axis=0, ddof=1) / math.sqrt(samples) if samples > 1 else np.nan
    return per.mean(axis=0), se


def markov_operator(e: Ensemble, psi: Observable, x, samples: int = 256, seed: int = 0):
    """``P psi(x) = int L_f psi(x) dm(f)`` and its standard error."""
    X, _ = _as_rows(x)
    v, se = markov_values(e, psi, X, samples, seed)
    return float(v[0]), float(np.atleast_1d(se)[0])


def markov_observable(e: Ensemble, psi: Observable, samples: int = 256,
                      seed: int = 0) -> Observable:
    """``P psi`` as an observable (exact for finite ensembles)."""
    return Observable(f"P[{psi.name}]",
                      lambda Z: markov_values(e, psi, Z, samples, seed)[0],
                      psi.kind, psi.beta, psi.norm_bound if e.finite else math.inf, psi.clip)


def coboundary(e: Ensemble, g0: Observable) -> Observable:
    """``g0 - P g0``; its limiting variance is ``<nu, g0^2 - (P g0)^2>``."""
    Pg = markov_observable(e, g0)
    return Observable(f"{g0.name}-P[{g0.name}]", lambda Z: g0.evaluate(Z) - Pg.evaluate(Z),
                      g0.kind, g0.beta, math.inf, g0.clip,
                      spec={"type": "coboundary", "g0": g0.spec})


def coboundary_variance(e: Ensemble, g0: Observable, nu: EmpiricalMeasure):
    """Direct ``<nu, g0^2 - (P g0)^2>`` with its standard error."""
    g = g0.evaluate(nu.points)
    pg = markov_values(e, g0, nu.points)[0]
    return nu.mean_se(g ** 2 - pg ** 2)


# ----------------------------------------------------------------------------
# powers of P
# ----------------------------------------------------------------------------

@dataclass
class PowerTable:
    """Estimates of ``P^j psi`` at points, ``j = 0..J``.

    ``halves`` holds two independent estimates (Monte Carlo mode) so that
    products are unbiased; in exact mode both halves equal ``values``.
    """

    values: np.ndarray
    halves: np.ndarray
    exact: bool


def _exact_powers(e: Ensemble, psi: Observable, X, J: int) -> np.ndarray:
    tab, w = _atoms(e)
    A, d = len(w), e.d
    N = X.shape[0]
    out = np.empty((J + 1, N))
    leaves_max = (A * d) ** J
    chunk = max(1, LEAF_CHUNK // max(leaves_max, 1))
    for a in range(0, N, chunk):
        nodes = X[a:a + chunk][:, None, :]
        wts = np.ones(1)
        M = nodes.shape[0]
        out[0, a:a + M] = psi.evaluate(nodes.reshape(M, 2))
        for j in range(1, J + 1):
            L = nodes.shape[1]
            flat = nodes.reshape(M * L, 2)
            kids = [preimage_roots(C, flat).reshape(M, L * d, 2) for C in tab]
            nodes = np.concatenate(kids, axis=1)
            wts = np.concatenate([np.repeat(wts, d) * (wk / d) for wk in w])
            vals = psi.evaluate(nodes.reshape(-1, 2)).reshape(M, -1)
            out[j, a:a + M] = vals @ wts
    return out


def _mc_powers(e: Ensemble, psi: Observable, X, J: int, paths: int, seed: int) -> np.ndarray:
    """``(2, J+1, N)``: two independent path-average estimates of ``P^j psi``."""
    N = X.shape[0]
    K = max(2, int(paths) // 2 * 2)
    h = K // 2
    batch = SequenceBatch(e, derive_seed(seed, SAMPLE), np.arange(K))
    ubase = derive_seed(seed, SAMPLE, ROOT)
    res = np.empty((2, J + 1, N))
    step = max(1, LEAF_CHUNK // K)
    for a in range(0, N, step):
        M = min(step, N - a)
        rows = np.repeat(X[a:a + M], K, axis=0)
        # path keys are global, so chunking does not change the draws
        flat = np.arange(a * K, (a + M) * K)
        local = np.arange(M * K)
        path_of = np.tile(np.arange(K), M)
        out = np.empty((J + 1, M, K))
        out[0] = psi.evaluate(rows).reshape(M, K)
        for j in range(1, J + 1):
            C = batch.coeffs(j - 1)
            if C.ndim == 3:
                C = C[path_of]
            R = preimage_roots(C, rows)
            d = R.shape[1]
            u = uniforms(ubase, flat, j)
            rows = R[local, np.minimum((u * d).astype(np.int64), d - 1)]
            out[j] = psi.evaluate(rows).reshape(M, K)
        res[0, :, a:a + M] = out[:, :, :h].mean(axis=2)
        res[1, :, a:a + M] = out[:, :, h:].mean(axis=2)
    return res


def markov_powers(e: Ensemble, psi: Observable, X, J: int, mode: str = "auto",
                  paths: int = 512, seed: int = 0, budget: int = EXACT_BUDGET) -> PowerTable:
    """``P^j psi`` at the rows of ``X`` for ``j <= J``.

    Exact mode enumerates all ``(atoms * d)^J`` weighted branches (finite
    ensembles only); Monte Carlo mode runs ``paths`` random pre-image paths
    per point, one path contributing to every level.
    """
    X = normalize_rows(np.atleast_2d(X))
    if mode == "auto":
        leaves = (len(e.atoms) * e.d) ** J if e.finite else math.inf
        mode = "exact" if leaves <= budget and leaves * X.shape[0] <= 16 * WORK_BUDGET \
            else "monte_carlo"
    if mode == "exact":
        if not e.finite:
            raise ValueError("exact powers need a finite ensemble")
        if (len(e.atoms) * e.d) ** J > budget:
            raise BudgetExceeded(f"exact P^{J} tree exceeds budget {budget}")
        v = _exact_powers(e, psi, X, J)
        return PowerTable(v, np.stack([v, v]), True)
    halves = _mc_powers(e, psi, X, J, paths, seed)
    return PowerTable(halves.mean(axis=0), halves, False)


# ----------------------------------------------------------------------------
# decay of correlations along fibers
# ----------------------------------------------------------------------------

def _fit(ns, norms):
    ns = np.asarray(ns, dtype=float)
    y = np.log(np.asarray(norms, dtype=float))
    slope, intercept = np.polyfit(ns, y, 1)
    resid = y - (slope * ns + intercept)
    return float(slope), float(intercept), resid.tolist()


@dataclass
class DecayReport:
    ns: List[int]
    norms: List[float]
    se: List[float]
    noise_floor: List[float]
    censored: List[bool]
    center: float
    center_se: float
    slope: Optional[float]
    intercept: Optional[float]
    residuals: List[float] = field(default_factory=list)
    envelope_slope: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def envelope_slope(psi: Observable, d: int) -> float:
    """Proven decay slope: ``-log d`` for dsh, ``-(beta/2) log d`` for Hoelder/smooth."""
    if psi.kind == "dsh":
        return -math.log(d)
    return -0.5 * psi.beta * math.log(d)


def decay_norm(s: MapSequence, e: Ensemble, psi: Observable, n_list: Sequence[int],
               samples: int = 4000, seed: int = 0, n_pre: int = 25,
               mode: str = "auto", mc_samples: int = 64) -> DecayReport:
    """``||L_{n-1} ... L_0 psi - c||_{L^2(mu_{shift^n s})}`` for ``n`` in ``n_list``.

    ``c = <mu_s, psi>`` and the fiber measures are backward samples of depth
    ``n_pre`` with ``samples`` points.  Since ``<mu_{shift^n s}, L^n psi> = c``,
    each level is centered by its own sample mean, which removes the
    centering error common to all levels; ``c`` itself is reported.  A norm
    is censored when it does not exceed ``3 SE`` (or ``1e-12``).  Raises
    `FitUnreliable` (carrying the report) if a norm before the last ``n`` is
    censored.
    """
    mu0 = backward_sample_fiber(s, n_pre, None, samples, derive_seed(seed, 0))
    center, center_se = mu0.mean_se(psi.evaluate(mu0.points))
    ns, norms, ses, floors, cens = [], [], [], [], []
    for n in n_list:
        mu_n = backward_sample_fiber(s.shift(n), n_pre, None, samples,
                                     derive_seed(seed, 1, n))
        h, hse = composed_transfer_values(s, psi, n, mu_n.points, mode, mc_samples,
                                          derive_seed(seed, 2, n))
        N = len(h)
        dev2 = (h - h.mean()) ** 2 * N / (N - 1) - hse ** 2
        m2 = float(dev2.mean())
        se2 = float(dev2.std(ddof=1) / math.sqrt(N))
        norm = math.sqrt(max(m2, 0.0))
        se = se2 / (2 * norm) if norm > 0 else math.sqrt(se2)
        floor = max(3 * se, 1e-12)
        ns.append(int(n))
        norms.append(norm)
        ses.append(se)
        floors.append(floor)
        cens.append(not norm > floor)
    keep = [i for i, c in enumerate(cens) if not c]
    slope = intercept = None
    resid: List[float] = []
    if len(keep) >= 2:
        slope, intercept, resid = _fit([ns[i] for i in keep], [norms[i] for i in keep])
    report = DecayReport(ns, norms, ses, floors, cens, center, center_se, slope, intercept,
                         resid, envelope_slope(psi, s.d))
    if all(c for c in cens) and all(n <= 1e-12 for n in norms) and \
            np.ptp(psi.evaluate(mu0.points)) == 0:
        return report  # constant observable
    if any(cens[:-1]):
        first = ns[cens.index(True)]
        raise FitUnreliable(f"{psi.name}: decay norm reached the noise floor at n={first}",
                            report)
    return report


# ----------------------------------------------------------------------------
# Gordin series and variance
# ----------------------------------------------------------------------------

@dataclass
class GordinResult:
    norms: List[float]
    norm_se: List[float]
    mean: float
    mean_se: float
    ratio: Optional[float]
    tail_bound: float
    exact: bool
    e: Ensemble = field(repr=False, default=None)
    psi: Observable = field(repr=False, default=None)
    J: int = 0
    mode: str = "auto"
    paths: int = 512
    seed: int = 0

    def g_values(self, X) -> np.ndarray:
        """``g_J = sum_{j<=J} (P^j psi - mean)`` at the rows of ``X``."""
        t = markov_powers(self.e, self.psi, X, self.J, self.mode, self.paths,
                          derive_seed(self.seed, 9))
        return (t.values - self.mean).sum(axis=0)

    def g(self) -> Observable:
        return Observable(f"g_{self.J}[{self.psi.name}]", self.g_values, self.psi.kind,
                          self.psi.beta)

    def to_dict(self) -> dict:
        return {"norms": self.norms, "norm_se": self.norm_se, "mean": self.mean,
                "mean_se": self.mean_se, "ratio": self.ratio, "tail_bound": self.tail_bound,
                "exact": self.exact, "J": self.J}


def _norms_from_table(t: PowerTable, nu: EmpiricalMeasure):
    """``||P^j psi - <nu, psi>||_{L^2(nu)}`` per level.

    Each level is centered by its own ``nu``-mean (equal to ``<nu, psi>`` by
    invariance), which removes the common centering error; the square is the
    covariance of the two independent halves, so it is unbiased.
    """
    norms, ses = [], []
    w = nu.weights
    for j in range(t.values.shape[0]):
        a, b = t.halves[0, j], t.halves[1, j]
        prod = (a - w @ a) * (b - w @ b)
        m2, se2 = nu.mean_se(prod)
        se2 = 0.0 if math.isnan(se2) else se2
        n = math.sqrt(max(m2, 0.0))
        norms.append(n)
        ses.append(se2 / (2 * n) if n > 0 else math.sqrt(se2))
    return norms, ses


def _tail(norms, ses, d):
    """Geometric extrapolation of ``sum_{j>J} ||P^j psi||`` from the fitted ratio.

    Uses the entries above ``3 SE`` (and above 1e-12); with fewer than two
    such entries after ``j = 0`` the ratio falls back to ``1/d``.
    """
    above = [j for j in range(1, len(norms)) if norms[j] > max(3 * ses[j], 1e-12)]
    ratio = None
    if len(above) >= 2:
        slope, _, _ = _fit(above, [norms[j] for j in above])
        ratio = math.exp(slope)
    r = ratio if ratio is not None else 1.0 / d
    if r >= 1:
        return ratio, math.inf
    last = norms[-1] + 3 * ses[-1]
    return ratio, last * r / (1 - r)


def _default_nu(e: Ensemble, seed: int) -> EmpiricalMeasure:
    return estimate_nu(e, chains=200, length=300, burn_in=200, seed=derive_seed(seed, 7))


def gordin_series(e: Ensemble, psi: Observable, J: int, nu: Optional[EmpiricalMeasure] = None,
                  mode: str = "auto", paths: int = 512, seed: int = 0) -> GordinResult:
    """Norms ``||P^j psi - <nu, psi>||_{L^2(nu)}`` for ``j <= J`` and the partial sum ``g_J``."""
    if J < 0:
        raise ValueError("J must be non-negative")
    nu = nu if nu is not None else _default_nu(e, seed)
    mean, mean_se = nu.mean_se(psi.evaluate(nu.points))
    t = markov_powers(e, psi, nu.points, J, mode, paths, seed)
    norms, ses = _norms_from_table(t, nu)
    ratio, tail = _tail(norms, ses, e.d)
    return GordinResult(norms, ses, mean, 0.0 if math.isnan(mean_se) else mean_se, ratio,
                        tail, t.exact, e, psi, J, mode, paths, seed)


@dataclass
class SigmaReport:
    sigma2: float
    se: float
    coboundary: bool
    gordin: GordinResult

    def to_dict(self) -> dict:
        return {"sigma2": self.sigma2, "se": self.se, "coboundary": self.coboundary,
                "gordin": self.gordin.to_dict()}


def sigma_squared(e: Ensemble, psi: Observable, J: int = 8,
                  nu: Optional[EmpiricalMeasure] = None, mode: str = "auto",
                  paths: int = 512, seed: int = 0, tail_tol: float = 0.05) -> SigmaReport:
    """``sigma^2 = <nu, g_J^2 - (P g_J)^2>`` from the Gordin partial sum.

    Since ``g_J - P g_J = psi - P^{J+1} psi``, the integrand is evaluated as
    ``(psi - P^{J+1} psi) (g_J + P g_J)`` with the two factors taken from
    independent path halves in Monte Carlo mode.  Raises `TailTooFat` when
    the extrapolated tail of the norm series exceeds ``tail_tol``.
    """
    nu = nu if nu is not None else _default_nu(e, seed)
    mean, mean_se = nu.mean_se(psi.evaluate(nu.points))
    t = markov_powers(e, psi, nu.points, J + 1, mode, paths, seed)
    norms, ses = _norms_from_table(t, nu)
    ratio, tail = _tail(norms[:J + 1], ses[:J + 1], e.d)
    g = GordinResult(norms[:J + 1], ses[:J + 1], mean, 0.0 if math.isnan(mean_se) else mean_se,
                     ratio, tail, t.exact, e, psi, J, mode, paths, seed)
    if tail > tail_tol:
        raise TailTooFat(f"{psi.name}: Gordin tail bound {tail:.3g} exceeds {tail_tol:g}")
    A, B = t.halves
    diff = A[0] - A[J + 1]
    ssum = (B[:J + 1] - mean).sum(axis=0) + (B[1:J + 2] - mean).sum(axis=0)
    s2, se = nu.mean_se(diff * ssum)
    se = 0.0 if math.isnan(se) else se
    cob = s2 <= 3 * se or abs(s2) <= 1e-14
    return SigmaReport(float(s2), float(se), bool(cob), g)
