"""Distributions on degree-d maps and reproducible i.i.d. map sequences.

Every random quantity is derived from a counter-based hash of
``(seed, index, ...)`` so that entry ``j`` of a sequence, or step ``j`` of
chain ``c``, can be generated in any order and by any worker with the same
result.
"""
from __future__ import annotations

import hashlib
import json
import math
import threading
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateAtom, RejectionOverflow, RejectionRate
from .proj import RationalMap, dist_to_degenerate, min_norm_lower_bound, min_sphere_norm

# ----------------------------------------------------------------------------
# counter-based hashing (splitmix64 finalizer)
# ----------------------------------------------------------------------------

_M64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)

# stream tags keep different uses of the same (seed, index) independent
ATOM = 1
ROOT = 2
BALL = 3
CHAIN = 4
START = 5
SAMPLE = 6


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _C1
    x = x ^ (x >> np.uint64(27))
    x = x * _C2
    return x ^ (x >> np.uint64(31))


def _u64(k):
    if isinstance(k, (int, np.integer)):
        return np.uint64(int(k) & _M64)
    arr = np.asarray(k)
    if arr.dtype == np.uint64:
        return arr
    return (arr.astype(np.int64)).astype(np.uint64)


def hash_keys(seed, *keys):
    """Vectorized 64-bit hash of ``(seed, *keys)``; keys broadcast like numpy arrays."""
    with np.errstate(over="ignore"):
        h = _mix(_u64(seed) + _GOLDEN)
        for k in keys:
            h = _mix(h ^ (_u64(k) * _GOLDEN + _C1))
    return h


def derive_seed(seed, *keys) -> int:
    return int(hash_keys(seed, *keys))


def uniforms(seed, *keys):
    """Uniform floats in ``[0, 1)`` derived from ``hash_keys``."""
    h = hash_keys(seed, *keys)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def rng_for(seed, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))


# ----------------------------------------------------------------------------
# ensembles
# ----------------------------------------------------------------------------

def _check_holomorphic(f: RationalMap):
    if dist_to_degenerate(f) == 0.0:
        raise DegenerateAtom(f"atom {f} lies on the degenerate locus")


class Ensemble:
    """Base class; subclasses are immutable dataclasses."""

    finite = False

    @property
    def d(self) -> int:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    @property
    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def draw(self, seed: int, j: int) -> RationalMap:
        """Entry ``j`` of the sequence with base ``seed``."""
        raise NotImplementedError

    def delta_min(self) -> float:
        """Lower bound on ``dist_to_degenerate`` over the support."""
        raise NotImplementedError

    def worst_log_min_norm(self, lift: str = "normalized") -> Optional[float]:
        """Upper bound on ``-log min_sphere_norm`` over the support (None if unbounded)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Dirac(Ensemble):
    f: RationalMap
    finite = True

    def __post_init__(self):
        _check_holomorphic(self.f)

    @property
    def d(self):
        return self.f.d

    @property
    def atoms(self) -> Tuple[RationalMap, ...]:
        return (self.f,)

    @property
    def weights(self) -> Tuple[float, ...]:
        return (1.0,)

    def describe(self):
        return {"kind": "dirac", "map": self.f.to_record()}

    def atom_index(self, seed, j):
        return np.zeros(np.broadcast(np.asarray(seed), np.asarray(j)).shape, dtype=np.int64)

    def draw(self, seed, j):
        return self.f

    def delta_min(self):
        return dist_to_degenerate(self.f)

    def worst_log_min_norm(self, lift="normalized"):
        return -math.log(min_sphere_norm(self.f, lift=lift))


@dataclass(frozen=True)
class FiniteMixture(Ensemble):
    atoms: Tuple[RationalMap, ...]
    weights: Tuple[float, ...]
    finite = True

    def __post_init__(self):
        atoms = tuple(self.atoms)
        w = tuple(float(x) for x in self.weights)
        if len(atoms) == 0 or len(atoms) != len(w):
            raise ValueError("need one positive weight per atom")
        if any(not x > 0 for x in w):
            raise ValueError("mixture weights must be positive")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {sum(w)!r}, not 1")
        if len({f.d for f in atoms}) != 1:
            raise ValueError("all atoms must share the same degree")
        for f in atoms:
            _check_holomorphic(f)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, maps: Sequence[RationalMap]) -> "FiniteMixture":
        n = len(maps)
        return cls(tuple(maps), tuple([1.0 / n] * n))

    @property
    def d(self):
        return self.atoms[0].d

    def describe(self):
        return {"kind": "mixture", "maps": [f.to_record() for f in self.atoms],
                "weights": [repr(w) for w in self.weights]}

    def atom_index(self, seed, j):
        """Atom indices for entries ``j`` of sequences with seeds ``seed`` (broadcast)."""
        u = uniforms(seed, j, ATOM)
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return np.minimum(np.searchsorted(cum, u, side="right"), len(self.atoms) - 1)

    def draw(self, seed, j):
        return self.atoms[int(self.atom_index(seed, j))]

    def delta_min(self):
        return min(dist_to_degenerate(f) for f in self.atoms)

    def worst_log_min_norm(self, lift="normalized"):
        return max(-math.log(min_sphere_norm(f, lift=lift)) for f in self.atoms)


@dataclass(frozen=True)
class CoefficientBall(Ensemble):
    """Uniform draws in the real coefficient ball of ``radius`` around ``base``.

    Draws are renormalized to unit coefficient norm; draws with
    ``dist_to_degenerate < floor`` are rejected and counted.
    """

    base: RationalMap
    radius: float
    floor: float = 1e-6
    reject: bool = True
    max_reject_fraction: float = 0.5
    max_attempts: int = 10_000

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError("radius must be non-negative")
        if not 0 <= self.floor < 1:
            raise ValueError("floor must lie in [0, 1)")

    @property
    def d(self):
        return self.base.d

    def describe(self):
        return {"kind": "ball", "base": self.base.to_record(), "radius": repr(float(self.radius)),
                "floor": repr(float(self.floor)), "reject": bool(self.reject)}

    def _draw_with_count(self, seed, j) -> Tuple[RationalMap, int]:
        rng = rng_for(seed, j, BALL)
        c = np.concatenate([self.base.coeffs[0], self.base.coeffs[1]])
        dim = 2 * c.size
        for attempt in range(1, self.max_attempts + 1):
            v = rng.normal(size=dim)
            v *= self.radius * rng.random() ** (1.0 / dim) / np.linalg.norm(v)
            cand = c + v[: c.size] + 1j * v[c.size:]
            k = self.base.d + 1
            f = RationalMap(self.base.d, tuple(cand[:k]), tuple(cand[k:]))
            if not self.reject or dist_to_degenerate(f) >= self.floor:
                if not self.reject and dist_to_degenerate(f) == 0.0:
                    continue
                return f, attempt - 1
        raise RejectionOverflow(f"no admissible draw after {self.max_attempts} attempts")

    def draw(self, seed, j):
        return self._draw_with_count(seed, j)[0]

    def delta_min(self):
        return self.floor if self.reject else 0.0

    def worst_log_min_norm(self, lift="normalized"):
        if not self.reject or self.floor <= 0:
            return None
        return -math.log(min_norm_lower_bound(self.floor, self.d))


# ----------------------------------------------------------------------------
# sequences
# ----------------------------------------------------------------------------

class _Store:
    """Append-only, publish-once table of realized entries shared by shifted views."""

    def __init__(self):
        self.entries: Dict[int, RationalMap] = {}
        self.rejections = 0
        self.lock = threading.Lock()


class MapSequence:
    """Lazily realized i.i.d. sequence ``(f_0, f_1, ...)`` drawn from an ensemble.

    Entry ``j`` depends only on ``(ensemble, seed, j)``.  ``shift`` returns a
    view sharing the realized table.
    """

    def __init__(self, ensemble: Ensemble, seed: int, n: int = 0, *, offset: int = 0,
                 _store: Optional[_Store] = None):
        self.ensemble = ensemble
        self.seed = int(seed) & _M64
        self.offset = int(offset)
        self._store = _store if _store is not None else _Store()
        if n:
            self.realize(n)

    @property
    def d(self) -> int:
        return self.ensemble.d

    def _absolute(self, j: int) -> RationalMap:
        store = self._store
        f = store.entries.get(j)
        if f is not None:
            return f
        if isinstance(self.ensemble, CoefficientBall):
            f, rej = self.ensemble._draw_with_count(self.seed, j)
        else:
            f, rej = self.ensemble.draw(self.seed, j), 0
        with store.lock:
            if j not in store.entries:
                store.entries[j] = f
                store.rejections += rej
            return store.entries[j]

    def entry(self, j: int) -> RationalMap:
        if j < 0:
            raise IndexError("sequence index must be non-negative")
        return self._absolute(self.offset + j)

    __getitem__ = entry

    def realize(self, n: int) -> "MapSequence":
        if n < 0:
            raise ValueError("n must be non-negative")
        for j in range(n):
            self.entry(j)
        if isinstance(self.ensemble, CoefficientBall):
            self._check_rejections()
        return self

    def _check_rejections(self):
        e = self.ensemble
        accepted = len(self._store.entries)
        draws = accepted + self._store.rejections
        if draws and self._store.rejections / draws > e.max_reject_fraction and draws >= 20:
            raise RejectionOverflow(
                f"rejection rate {self._store.rejections / draws:.3f} exceeds "
                f"{e.max_reject_fraction}")

    @property
    def rejection_rate(self) -> float:
        draws = len(self._store.entries) + self._store.rejections
        return self._store.rejections / draws if draws else 0.0

    def realized_length(self) -> int:
        """Length of the contiguous realized prefix of this view."""
        n = 0
        while (self.offset + n) in self._store.entries:
            n += 1
        return n

    __len__ = realized_length

    def prefix(self, n: int) -> List[RationalMap]:
        return [self.entry(j) for j in range(n)]

    def shift(self, k: int = 1) -> "MapSequence":
        return MapSequence(self.ensemble, self.seed, offset=self.offset + k, _store=self._store)

    def atom_indices(self, n: int, start: int = 0) -> np.ndarray:
        """Atom indices of entries ``start .. start+n-1`` (finite ensembles only)."""
        j = np.arange(start, start + n) + self.offset
        return self.ensemble.atom_index(self.seed, j)

    def coeff_array(self, n: int, lift: str = "normalized", start: int = 0) -> np.ndarray:
        """Lift coefficients of entries ``start .. start+n-1``, shape ``(n, 2, d+1)``."""
        e = self.ensemble
        if e.finite:
            table = np.stack([f.lift_coeffs(lift) for f in e.atoms])
            return table[self.atom_indices(n, start)]
        return np.stack([self.entry(start + j).lift_coeffs(lift) for j in range(n)])

    def __repr__(self):
        return (f"MapSequence(ensemble={self.ensemble.digest}, seed={self.seed}, "
                f"offset={self.offset}, realized={self.realized_length()})")


def sample_sequence(e: Ensemble, seed: int, n: int) -> MapSequence:
    if n < 0:
        raise ValueError("n must be non-negative")
    s = MapSequence(e, seed, n)
    if isinstance(e, CoefficientBall) and n:
        warnings.warn(f"coefficient ball rejection rate {s.rejection_rate:.4f}", RejectionRate,
                      stacklevel=2)
    return s


def shift(s: MapSequence, k: int = 1) -> MapSequence:
    return s.shift(k)


class SequenceBatch:
    """Many independent sequences, chain ``c`` seeded by ``hash_keys(seed, c, CHAIN)``."""

    def __init__(self, ensemble: Ensemble, seed: int, chains: Sequence[int]):
        self.ensemble = ensemble
        self.seed = int(seed)
        self.chains = np.asarray(chains, dtype=np.int64)
        self.seeds = hash_keys(self.seed, self.chains, CHAIN)
        self._seqs = None
        if ensemble.finite:
            self._table = {}

    def sequence(self, i: int) -> MapSequence:
        return MapSequence(self.ensemble, int(self.seeds[i]))

    def coeffs(self, j: int, lift: str = "normalized") -> np.ndarray:
        """Entry-``j`` coefficients for every chain: ``(2, d+1)`` or ``(N, 2, d+1)``."""
        e = self.ensemble
        if isinstance(e, Dirac):
            return e.f.lift_coeffs(lift)
        if e.finite:
            if lift not in self._table:
                self._table[lift] = np.stack([f.lift_coeffs(lift) for f in e.atoms])
            return self._table[lift][e.atom_index(self.seeds, j)]
        if self._seqs is None:
            self._seqs = [MapSequence(e, int(s)) for s in self.seeds]
        return np.stack([s.entry(j).lift_coeffs(lift) for s in self._seqs])


# ----------------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------------

def log_dist_mean(e: Ensemble, samples: int, seed: int = 0) -> Tuple[float, float]:
    """Estimate of ``E log dist_to_degenerate(f)`` with its standard error.

    Exact (SE 0) for finite ensembles.
    """
    if samples < 2:
        raise ValueError("samples must be at least 2")
    if e.finite:
        vals = []
        for f in e.atoms:
            dl = dist_to_degenerate(f)
            if dl == 0.0:
                raise DegenerateAtom(f"atom {f} has zero resultant")
            vals.append(math.log(dl))
        return float(np.dot(e.weights, vals)), 0.0
    s = MapSequence(e, seed, samples)
    logs = np.array([math.log(dist_to_degenerate(s.entry(j))) for j in range(samples)])
    return float(logs.mean()), float(logs.std(ddof=1) / math.sqrt(samples))


@dataclass
class TailReport:
    j0: int
    violations: List[int]
    j0_guaranteed: Optional[int]
    delta_min: float
    epsilon: float
    n: int


def tail_distance_check(s: MapSequence, epsilon: float, n: int) -> TailReport:
    """First index after which ``delta(f_j) >= exp(-epsilon j)`` for realized ``j < n``.

    ``j0_guaranteed = ceil(-log delta_min / epsilon)`` is the index beyond
    which the inequality holds for every realization of the ensemble.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    deltas = [dist_to_degenerate(s.entry(j)) for j in range(n)]
    violations = [j for j, dl in enumerate(deltas) if dl < math.exp(-epsilon * j)]
    j0 = violations[-1] + 1 if violations else 0
    dmin = s.ensemble.delta_min()
    if epsilon > 0 and dmin > 0:
        guaranteed = max(0, math.ceil(-math.log(dmin) / epsilon - 1e-12))
    else:
        guaranteed = None
    return TailReport(j0, violations, guaranteed, dmin, epsilon, n)
