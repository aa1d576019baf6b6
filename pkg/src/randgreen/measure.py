"""Fiber measures by backward iteration, the random pre-image Markov chain,
and comparison of empirical measures on a panel of observables."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .ensemble import (ATOM, CHAIN, ROOT, START, CoefficientBall, Ensemble, MapSequence,
                       SequenceBatch, derive_seed, hash_keys, rng_for, uniforms)
from .errors import ExceptionalSuspect
from .proj import (CLUSTER_TOL, PointP1, RationalMap, fs_distance_arr, lift_eval,
                   normalize_rows, preimage_roots, random_unitary)

# generic base point for starts; perturbed by a small seeded unitary
GENERIC_START = np.array([0.6 + 0.3j, 1.0 + 0j]) / math.hypot(abs(0.6 + 0.3j), 1.0)
START_PERTURBATION = 0.05


def hopf(Z) -> np.ndarray:
    """Image of unit vectors on the unit 2-sphere; chordal distance ``2 sin(d_FS)``."""
    Z = np.atleast_2d(Z)
    w = Z[:, 0] * np.conj(Z[:, 1])
    return np.stack([2 * w.real, 2 * w.imag, np.abs(Z[:, 0]) ** 2 - np.abs(Z[:, 1]) ** 2],
                    axis=1)


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud on P^1.

    ``groups`` optionally labels points by the chain that produced them so
    that standard errors can use batch (per-chain) means.
    """

    points: np.ndarray
    weights: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = normalize_rows(np.atleast_2d(self.points))
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 0:
            w = np.full(len(self.points), float(w))
        if len(w) != len(self.points):
            raise ValueError("one weight per point required")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            w = w / w.sum()
        self.weights = w

    @classmethod
    def uniform(cls, points, groups=None) -> "EmpiricalMeasure":
        points = np.atleast_2d(points)
        return cls(points, np.full(len(points), 1.0 / len(points)), groups)

    @classmethod
    def dirac(cls, z: PointP1) -> "EmpiricalMeasure":
        return cls(z.vec[None, :], np.ones(1))

    def __len__(self):
        return len(self.weights)

    def integrate(self, psi) -> float:
        return float(self.weights @ psi.evaluate(self.points))

    def mean_se(self, values) -> tuple:
        """Weighted mean of per-point ``values`` and its standard error.

        Uses per-group means when groups are present (serially correlated
        chain samples), otherwise the i.i.d. formula.
        """
        values = np.asarray(values, dtype=float)
        mean = float(self.weights @ values)
        if self.groups is not None:
            labels, inv = np.unique(self.groups, return_inverse=True)
            if len(labels) < 2:
                return mean, math.nan
            wsum = np.bincount(inv, weights=self.weights)
            gmean = np.bincount(inv, weights=self.weights * values) / wsum
            return mean, float(np.std(gmean, ddof=1) / math.sqrt(len(labels)))
        n = len(values)
        if n < 2:
            return mean, math.nan
        neff = 1.0 / float(self.weights @ self.weights)
        var = float(self.weights @ (values - mean) ** 2) * n / (n - 1)
        return mean, math.sqrt(var / neff)

    def deduplicate(self, tol: float = CLUSTER_TOL) -> "EmpiricalMeasure":
        """Merge points closer than ``tol`` in FS distance, summing weights."""
        if len(self) < 2:
            return self
        tree = cKDTree(hopf(self.points))
        pairs = tree.query_pairs(2 * math.sin(tol), output_type="ndarray")
        n = len(self)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        k, labels = connected_components(graph, directed=False)
        first = np.full(k, -1)
        for i, lab in enumerate(labels):
            if first[lab] < 0:
                first[lab] = i
        return EmpiricalMeasure(self.points[first], np.bincount(labels, weights=self.weights))

    def to_csv(self) -> str:
        lines = ["x_re,x_im,y_re,y_im,weight"]
        for (x, y), w in zip(self.points, self.weights):
            lines.append(f"{x.real!r},{x.imag!r},{y.real!r},{y.imag!r},{float(w)!r}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# start points
# ----------------------------------------------------------------------------

def generic_start(seed: int, *keys) -> np.ndarray:
    """Fixed generic point moved by a small seeded unitary (unit vector)."""
    U = random_unitary(rng_for(seed, *keys, START), scale=START_PERTURBATION)
    return U @ GENERIC_START


def generic_starts(seed: int, count: int) -> np.ndarray:
    return np.stack([generic_start(seed, c) for c in range(count)])


# ----------------------------------------------------------------------------
# backward iteration along a fixed sequence
# ----------------------------------------------------------------------------

def descend(coeffs, X, u, collapse_levels: Optional[List[bool]] = None):
    """Random multiplicity-weighted descent through ``coeffs[-1], ..., coeffs[0]``.

    ``coeffs`` is a list of ``(2, d+1)`` (or per-row ``(N, 2, d+1)``) arrays and
    ``u[:, j]`` the uniform used at level ``j``.  Returns the path as a list
    ``[X_n, X_{n-1}, ..., X_0]`` where ``X_j`` lies over ``X_{j+1}``.
    """
    X = np.atleast_2d(X)
    path = [X]
    rows = np.arange(X.shape[0])
    for j in range(len(coeffs) - 1, -1, -1):
        R = preimage_roots(coeffs[j], X)
        d = R.shape[1]
        if collapse_levels is not None:
            spread = fs_distance_arr(R[:, 0], R[:, 1:].transpose(1, 0, 2)).max()
            collapse_levels.append(bool(spread <= CLUSTER_TOL))
        idx = np.minimum((u[:, j] * d).astype(np.int64), d - 1)
        X = R[rows, idx]
        path.append(X)
    return path


def _collapse_warning(levels: List[bool], threshold: int = 5):
    run = best = 0
    for c in levels:
        run = run + 1 if c else 0
        best = max(best, run)
    if best >= min(threshold, len(levels)) and best > 0:
        warnings.warn(f"pre-image tree collapsed for {best} consecutive levels; the start "
                      f"point may be exceptional", ExceptionalSuspect, stacklevel=3)
        return True
    return False


def backward_sample_fiber(s: MapSequence, n: int, a=None, count: int = 10_000,
                          seed: int = 0) -> EmpiricalMeasure:
    """Samples of ``d^-n F_n^* delta_a``: descend from ``a`` by ``f_{n-1}`` first.

    ``a`` defaults to `generic_start(seed)`.
    """
    if a is None:
        a = generic_start(seed)
    a = a.vec if isinstance(a, PointP1) else np.asarray(a, dtype=complex)
    a = a / np.linalg.norm(a)
    X = np.repeat(a[None, :], count, axis=0)
    if n == 0:
        return EmpiricalMeasure.uniform(X)
    coeffs = list(s.coeff_array(n))
    u = uniforms(seed, np.arange(count)[:, None], np.arange(n)[None, :] + s.offset, ROOT)
    levels: List[bool] = []
    path = descend(coeffs, X, u, collapse_levels=levels)
    _collapse_warning(levels)
    return EmpiricalMeasure.uniform(path[-1])


def fiber_orbits(batch: SequenceBatch, n: int, n_pre: int, X_top=None, observer=None,
                 seed_key: int = 0):
    """Stationary orbit segments ``x_0, ..., x_n`` with ``x_0 ~ mu_lambda``.

    For each chain, ``x_n`` is drawn from the depth-``n_pre`` backward sample
    of ``mu_{shift^n lambda}`` and the orbit is then reconstructed downwards
    by uniform pre-image choices under ``f_{n-1}, ..., f_0``.  This has the
    same joint law as ``x_{j+1} = f_j(x_j)`` with ``x_0 ~ mu_lambda`` but
    avoids forward iteration, which is unstable on the Julia set.

    ``observer(j, X)`` is called for ``j = n, n-1, ..., 0`` with the states
    at time ``j``.  Without an observer the orbit is returned as an array of
    shape ``(n + 1, N, 2)`` indexed by time.
    """
    N = len(batch.seeds)
    if X_top is None:
        X_top = np.stack([generic_start(int(sd), seed_key) for sd in batch.seeds])
    orbit = None
    if observer is None:
        orbit = np.empty((n + 1, N, 2), dtype=complex)

        def observer(j, X):
            orbit[j] = X

    X = np.atleast_2d(X_top)
    rows = np.arange(N)
    if n_pre == 0:
        observer(n, X)
    for j in range(n + n_pre - 1, -1, -1):
        R = preimage_roots(batch.coeffs(j), X)
        d = R.shape[1]
        u = uniforms(batch.seeds, j, ROOT)
        X = R[rows, np.minimum((u * d).astype(np.int64), d - 1)]
        if j <= n:
            observer(j, X)
    return orbit


# ----------------------------------------------------------------------------
# Markov chain on pre-images
# ----------------------------------------------------------------------------

@dataclass
class ChainPath:
    initial: PointP1
    points: np.ndarray
    seed: int
    ensemble_hash: str
    map_hashes: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def to_csv(self) -> str:
        lines = ["step,x_re,x_im,y_re,y_im,map"]
        for j, (x, y) in enumerate(self.points):
            mh = self.map_hashes[j - 1] if j > 0 else ""
            lines.append(f"{j},{x.real!r},{x.imag!r},{y.real!r},{y.imag!r},{mh}")
        return "\n".join(lines) + "\n"


def _draw_from(e: Ensemble, u: float, ball_seed: int) -> RationalMap:
    if e.finite:
        cum = np.cumsum(e.weights)
        return e.atoms[min(int(np.searchsorted(cum, u, side="right")), len(e.atoms) - 1)]
    return e.draw(ball_seed, 0)


def markov_step(e: Ensemble, x: PointP1, rng: np.random.Generator):
    """One transition of the chain: ``f ~ m``, then a uniform pre-image (with multiplicity)."""
    f = _draw_from(e, rng.random(), int(rng.integers(0, 2 ** 63)))
    R = preimage_roots(f.coeffs, x.vec[None, :])[0]
    k = int(rng.integers(0, f.d))
    return PointP1.from_vec(R[k]), f


def run_chains(e: Ensemble, X0, steps: int, seed: int, chains: Sequence[int],
               start_step: int = 0, observer=None):
    """Advance chains ``chains`` (ids) from ``X0`` by ``steps`` transitions.

    Chain ``c`` uses the map sequence with seed ``derive_seed(seed, c, CHAIN)``
    and step ``j`` uses that sequence's entry ``j``.  ``observer(j, X)`` is
    called with the state after each step.  Returns the final states.
    """
    batch = SequenceBatch(e, seed, chains)
    X = np.atleast_2d(X0)
    rows = np.arange(X.shape[0])
    for j in range(start_step, start_step + steps):
        R = preimage_roots(batch.coeffs(j), X)
        d = R.shape[1]
        u = uniforms(batch.seeds, j, ROOT)
        X = R[rows, np.minimum((u * d).astype(np.int64), d - 1)]
        if observer is not None:
            observer(j + 1, X)
    return X


def markov_chain(e: Ensemble, x0: PointP1, length: int, seed: int) -> ChainPath:
    """Chain path ``Z_0 = x0, ..., Z_length``; step ``j`` uses entry ``j`` of
    ``MapSequence(e, seed)`` and a hashed uniform for the branch."""
    if length < 0:
        raise ValueError("length must be non-negative")
    s = MapSequence(e, seed)
    pts = np.empty((length + 1, 2), dtype=complex)
    pts[0] = x0.vec
    hashes = []
    X = x0.vec[None, :]
    for j in range(length):
        f = s.entry(j)
        R = preimage_roots(f.coeffs, X)
        u = float(uniforms(s.seed, j, ROOT))
        X = R[:, min(int(u * f.d), f.d - 1)]
        pts[j + 1] = X[0]
        hashes.append(f.digest)
    return ChainPath(x0, pts, seed, e.digest, hashes)


def stationary_states(e: Ensemble, chains: int, burn_in: int, seed: int,
                      chain_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """States of independent chains after ``burn_in`` steps from generic starts."""
    ids = np.arange(chains) if chain_ids is None else np.asarray(chain_ids)
    X0 = np.stack([generic_start(seed, int(c)) for c in ids])
    return run_chains(e, X0, burn_in, seed, ids)


def estimate_nu(e: Ensemble, chains: int, length: int, burn_in: int,
                seed: int) -> EmpiricalMeasure:
    """Pooled states ``Z_{burn_in+1}, ..., Z_length`` of ``chains`` chains."""
    if not 0 <= burn_in < length:
        raise ValueError("need 0 <= burn_in < length")
    ids = np.arange(chains)
    X0 = np.stack([generic_start(seed, int(c)) for c in ids])
    kept = []

    def observer(j, X):
        if j > burn_in:
            kept.append(X)

    run_chains(e, X0, length, seed, ids, observer=observer)
    pts = np.stack(kept, axis=1).reshape(-1, 2)
    groups = np.repeat(ids, length - burn_in)
    return EmpiricalMeasure.uniform(pts, groups)


def push_forward(e: Ensemble, m: EmpiricalMeasure, seed: int) -> EmpiricalMeasure:
    """Image of ``m`` under one independent random map per point."""
    ids = np.arange(len(m))
    if e.finite:
        table = np.stack([f.coeffs for f in e.atoms])
        C = table[e.atom_index(seed, ids)] if len(e.atoms) > 1 else e.atoms[0].coeffs
    else:
        C = np.stack([e.draw(derive_seed(seed, i), 0).coeffs for i in ids])
    return EmpiricalMeasure(normalize_rows(lift_eval(C, m.points)), m.weights, m.groups)


# ----------------------------------------------------------------------------
# comparison
# ----------------------------------------------------------------------------

@dataclass
class Discrepancy:
    sup: float
    per_observable: dict


def measure_discrepancy(m1: EmpiricalMeasure, m2: EmpiricalMeasure, panel) -> Discrepancy:
    """``sup_psi |<m1, psi> - <m2, psi>|`` over a nonempty panel of observables."""
    panel = list(panel)
    if not panel:
        raise ValueError("panel must be nonempty")
    per = {psi.name: abs(m1.integrate(psi) - m2.integrate(psi)) for psi in panel}
    return Discrepancy(max(per.values()), per)
