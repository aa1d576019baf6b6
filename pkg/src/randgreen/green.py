"""Random Green function, potential grids and the equilibrium measure.

For a sequence of lifts ``f_0, f_1, ...`` the Green function is

    G(Z) = lim_n d^-n log ||F_n(Z)||,   F_n = f_{n-1} o ... o f_0,

computed with the point renormalized at every step so only the accumulated
log-magnitude grows.  Each step contributes ``d^-(j+1) log ||f_j(W_j)||`` with
``W_j`` the unit direction of ``F_j(Z)``; since that log lies between
``log m(f_j)`` and ``log C(f_j)`` the tail of the series is bounded by
``sum_{j>=n} d^-(j+1) (log C - log m)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ensemble import CoefficientBall, MapSequence, rng_for
from .errors import (DegenerateEntry, DegenerateEvaluation, InsufficientDepth, MassDefect,
                     UnboundedTail)
from .measure import EmpiricalMeasure
from .proj import (PointP1, RationalMap, dist_to_degenerate, fs_distance_arr, lift_eval,
                   min_norm_lower_bound, min_sphere_norm, normalize_rows)

# realized entries beyond the truncation depth that are bounded individually
_LOOKAHEAD = 64


@dataclass(frozen=True)
class GreenEstimate:
    value: float
    truncation_bound: float
    n_used: int


# ----------------------------------------------------------------------------
# truncation bounds
# ----------------------------------------------------------------------------

def _step_bound(f: RationalMap, lift: str) -> float:
    C = f.lift_coeffs(lift)
    log_cap = math.log(math.sqrt(f.d + 1) * float(np.linalg.norm(C)))
    log_min = math.log(min_sphere_norm(f, lift=lift))
    return max(log_cap, 0.0) - min(log_min, 0.0)


def _worst_step_bound(s: MapSequence, lift: str) -> Optional[float]:
    e = s.ensemble
    if e.finite:
        return max(_step_bound(f, lift) for f in e.atoms)
    if isinstance(e, CoefficientBall):
        worst = e.worst_log_min_norm(lift="normalized")
        if worst is None:
            return None
        log_cap = math.log(math.sqrt(e.d + 1))
        if lift == "given":
            # drawn coefficient norms lie in [1 - r, 1 + r] around the unit base
            r = min(e.radius, 0.999)
            return max(log_cap + math.log1p(r), 0.0) + max(worst - math.log1p(-r), 0.0)
        return log_cap + worst
    return None


def truncation_bound(s: MapSequence, n: int, lift: str = "normalized") -> Optional[float]:
    """Upper bound on ``|G - G_n|``; None when the ensemble has no tail bound."""
    d = s.d
    total = 0.0
    j = n
    entries = s._store.entries
    while j < n + _LOOKAHEAD and (s.offset + j) in entries:
        total += d ** -(j + 1) * _step_bound(entries[s.offset + j], lift)
        j += 1
    worst = _worst_step_bound(s, lift)
    if worst is None:
        return None
    # geometric remainder sum_{i >= j} d^-(i+1)
    return total + worst * d ** -j / (d - 1)


# ----------------------------------------------------------------------------
# Green function values
# ----------------------------------------------------------------------------

def _check_entries(s: MapSequence, n: int):
    if s.ensemble.finite:
        return
    for j in range(n):
        if dist_to_degenerate(s.entry(j)) == 0.0:
            raise DegenerateEntry(f"entry {j} of {s!r} is degenerate")


def iterate_lifts(coeffs, Z):
    """Push unit vectors ``Z`` through the lifts ``coeffs[0], coeffs[1], ...``.

    Returns ``(W, logs)``: final unit directions and the ``(n, N)`` array of
    per-step ``log ||f_j(W_j)||``.
    """
    W = np.atleast_2d(np.asarray(Z, dtype=complex))
    logs = np.empty((len(coeffs), W.shape[0]))
    for j, C in enumerate(coeffs):
        V = lift_eval(C, W)
        nrm = np.linalg.norm(V, axis=1)
        if np.any(nrm == 0):
            raise DegenerateEvaluation(f"lift {j} vanishes at an iterate")
        logs[j] = np.log(nrm)
        W = V / nrm[:, None]
    return W, logs


def green_values(s: MapSequence, Z, n: int, lift: str = "normalized") -> np.ndarray:
    """Vectorized ``d^-n log ||F_n(Z)||`` for unit rows of ``Z``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=complex))
    if n == 0:
        return np.log(np.linalg.norm(Z, axis=1))
    _check_entries(s, n)
    C = s.coeff_array(n, lift)
    _, logs = iterate_lifts(C, normalize_rows(Z))
    weights = float(s.d) ** -np.arange(1, n + 1)
    return np.log(np.linalg.norm(Z, axis=1)) + weights @ logs


def green_function(s: MapSequence, Z, n: int, lift: str = "normalized",
                   require_bound: bool = False) -> GreenEstimate:
    """Finite-depth random Green function at ``Z`` with a certified tail bound.

    ``Z`` is a `PointP1` or a nonzero vector of C^2 (the value then includes
    ``log ||Z||``); an ``(N, 2)`` array gives an array of values.  With ``lift="given"`` the maps' original coefficient
    scale is used, e.g. ``(X^2, Y^2)`` for ``z^2``, whose Green function is
    ``log max(|x|, |y|)``.
    """
    vec = Z.vec if isinstance(Z, PointP1) else np.asarray(Z, dtype=complex)
    if vec.ndim == 2:
        value = green_values(s, vec, n, lift)
    else:
        value = float(green_values(s, vec[None, :], n, lift)[0])
    bound = truncation_bound(s, n, lift)
    if bound is None:
        if require_bound:
            raise UnboundedTail("ensemble admits no lower bound on the sphere norm of lifts")
        warnings.warn("truncation bound unavailable for this ensemble", stacklevel=2)
        bound = math.inf
    return GreenEstimate(value, bound, n)


def invariance_residual(s: MapSequence, Z, n: int, lift: str = "normalized") -> float:
    """``|G_{shift s, n}(f_0 Z / |f_0 Z|) + log|f_0 Z| - d G_{s, n+1}(Z)|``.

    ``F_{s, n+1} = F_{shift s, n} o f_0`` makes this vanish identically; the
    result measures floating-point error only (maximum over rows of ``Z``).
    """
    vec = Z.vec if isinstance(Z, PointP1) else np.asarray(Z, dtype=complex)
    V = normalize_rows(np.atleast_2d(vec))
    W1 = lift_eval(s.entry(0).lift_coeffs(lift), V)
    c = np.log(np.linalg.norm(W1, axis=1))
    A = green_values(s.shift(), normalize_rows(W1), n, lift) + c
    B = s.d * green_values(s, V, n + 1, lift)
    return float(np.max(np.abs(A - B)))


# ----------------------------------------------------------------------------
# potential grids
# ----------------------------------------------------------------------------

CHARTS = ("z", "w")


def chart_lift(chart: str, t) -> np.ndarray:
    """Unit lifts of chart coordinates: ``[t:1]`` for the z-chart, ``[1:t]`` for w."""
    t = np.asarray(t, dtype=complex).ravel()
    one = np.ones_like(t)
    if chart == "z":
        V = np.stack([t, one], axis=1)
    elif chart == "w":
        V = np.stack([one, t], axis=1)
    else:
        raise ValueError(f"unknown chart {chart!r}")
    return normalize_rows(V)


@dataclass
class PotentialGrid:
    """Values ``u(t) = G(unit lift of t)`` at cell centres of a square chart grid.

    ``values[i, k]`` sits at ``t = re[k] + 1j * im[i]``.
    """

    chart: str
    resolution: int
    extent: Tuple[float, float, float, float]
    n_used: int
    truncation_bound: float
    values: np.ndarray
    lift: str = "normalized"

    @property
    def spacing(self) -> Tuple[float, float]:
        x0, x1, y0, y1 = self.extent
        return (x1 - x0) / self.resolution, (y1 - y0) / self.resolution

    @property
    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        x0, x1, y0, y1 = self.extent
        hx, hy = self.spacing
        k = np.arange(self.resolution) + 0.5
        return x0 + k * hx, y0 + k * hy

    @property
    def coords(self) -> np.ndarray:
        re, im = self.axes
        return re[None, :] + 1j * im[:, None]

    def affine_potential(self) -> np.ndarray:
        """``G`` on the affine lift ``(t, 1)`` / ``(1, t)``: ``u + log sqrt(1 + |t|^2)``."""
        return self.values + 0.5 * np.log1p(np.abs(self.coords) ** 2)

    def header(self) -> dict:
        return {"chart": self.chart, "resolution": self.resolution,
                "extent": list(self.extent), "n_used": self.n_used,
                "truncation_bound": self.truncation_bound, "lift": self.lift}

    def to_text(self) -> str:
        lines = ["# randgreen potential grid v1"]
        for key, val in self.header().items():
            lines.append(f"# {key}: {val!r}" if not isinstance(val, list)
                         else f"# {key}: {' '.join(repr(float(v)) for v in val)}")
        for row in self.values:
            lines.append(" ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PotentialGrid":
        head = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("# ") and ":" in line:
                key, _, val = line[2:].partition(":")
                head[key.strip()] = val.strip()
            elif line and not line.startswith("#"):
                rows.append([float(v) for v in line.split()])
        extent = tuple(float(v) for v in head["extent"].split())
        return cls(chart=head["chart"].strip("'\""), resolution=int(head["resolution"]),
                   extent=extent, n_used=int(head["n_used"]),
                   truncation_bound=float(head["truncation_bound"]),
                   values=np.array(rows), lift=head.get("lift", "'normalized'").strip("'\""))

    def to_csv(self) -> str:
        re, im = self.axes
        lines = ["re,im,u"]
        for i, y in enumerate(im):
            for k, x in enumerate(re):
                lines.append(f"{float(x)!r},{float(y)!r},{float(self.values[i, k])!r}")
        return "\n".join(lines) + "\n"


def potential_grid(s: MapSequence, chart: str = "z", resolution: int = 256, n: int = 25,
                   extent: Sequence[float] = (-2.0, 2.0, -2.0, 2.0),
                   lift: str = "normalized") -> PotentialGrid:
    if resolution < 1:
        raise ValueError("resolution must be positive")
    x0, x1, y0, y1 = (float(v) for v in extent)
    grid = PotentialGrid(chart, int(resolution), (x0, x1, y0, y1), n, 0.0,
                         np.zeros((resolution, resolution)), lift)
    Z = chart_lift(chart, grid.coords)
    grid.values = green_values(s, Z, n, lift).reshape(resolution, resolution)
    bound = truncation_bound(s, n, lift)
    grid.truncation_bound = math.inf if bound is None else bound
    return grid


@dataclass
class MeasureInfo:
    pre_normalization_mass: float
    defect: float
    clipped_negative_mass: float
    chart_mass: dict = field(default_factory=dict)


# charts are blended by a partition of unity in log|t| supported on
# exp(-SEAM) <= |t| <= exp(SEAM); chi_z(t) + chi_w(1/t) = 1
SEAM = math.log(1.25)


def _seam_weight(t) -> np.ndarray:
    x = np.clip(-np.log(np.maximum(np.abs(t), 1e-300)) / SEAM, -1.0, 1.0)
    return 0.5 + (15 * x - 10 * x ** 3 + 3 * x ** 5) / 16


def _chart_masses(g: PotentialGrid):
    hx, hy = g.spacing
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise ValueError("measure_from_potential needs square cells")
    u = g.values
    lap = np.full_like(u, np.nan)
    lap[1:-1, 1:-1] = (u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2]
                       - 4 * u[1:-1, 1:-1])
    t = g.coords
    fs = hx * hy / (np.pi * (1 + np.abs(t) ** 2) ** 2)
    chi = _seam_weight(t)
    keep = chi > 0
    if np.any(np.isnan(lap[keep])):
        raise ValueError(f"grid extent must contain |t| <= {math.exp(SEAM):g} in its interior")
    return t[keep], chi[keep] * (lap[keep] / (2 * np.pi) + fs[keep])


def measure_from_potential(gz: PotentialGrid, gw: PotentialGrid,
                           max_defect: float = 0.05) -> Tuple[EmpiricalMeasure, MeasureInfo]:
    """Cell masses of ``omega_FS + dd^c u`` from a z-chart and a w-chart grid.

    The charts are blended by a smooth partition of unity in ``log|z|``
    around the unit circle, so a kink of ``u`` on the seam is not split
    between two staircases.  Both grids must cover ``|t| <= 1.25``.
    Negative cell masses (discretization artefacts) are clipped and reported.
    """
    if {gz.chart, gw.chart} != {"z", "w"}:
        raise ValueError("need one z-chart and one w-chart grid")
    if gz.chart == "w":
        gz, gw = gw, gz
    tz, mz = _chart_masses(gz)
    tw, mw = _chart_masses(gw)
    total = float(mz.sum() + mw.sum())
    defect = total - 1.0
    if abs(defect) > max_defect:
        raise MassDefect(f"pre-normalization mass {total:.4f} deviates from 1 by more "
                         f"than {max_defect}")
    pts = np.concatenate([chart_lift("z", tz), chart_lift("w", tw)])
    mass = np.concatenate([mz, mw])
    clipped = float(-mass[mass < 0].sum())
    keep = mass > 0
    measure = EmpiricalMeasure(pts[keep], mass[keep] / mass[keep].sum())
    info = MeasureInfo(total, defect, clipped,
                       {"z": float(mz.sum()), "w": float(mw.sum())})
    return measure, info


def equilibrium_measure(s: MapSequence, resolution: int = 512, n: int = 25,
                        half_width: float = 1.5, lift: str = "normalized"):
    """Convenience: both chart grids on ``[-half_width, half_width]^2`` and the measure."""
    ext = (-half_width, half_width, -half_width, half_width)
    gz = potential_grid(s, "z", resolution, n, ext, lift)
    gw = potential_grid(s, "w", resolution, n, ext, lift)
    return measure_from_potential(gz, gw)


# ----------------------------------------------------------------------------
# Hoelder modulus probe
# ----------------------------------------------------------------------------

@dataclass
class HolderReport:
    scales: List[float]
    sup_increments: List[float]
    beta_hat: Optional[float]
    intercept: Optional[float]
    truncation_bound: float


def holder_modulus(s: MapSequence, region: Sequence[float], scales: Sequence[float],
                   pairs: int, n: int, seed: int = 0, chart: str = "z",
                   lift: str = "normalized") -> HolderReport:
    """Sup of ``|u(z) - u(z')|`` over sampled pairs at FS distance exactly ``h``.

    ``region = (re_min, re_max, im_min, im_max)`` in chart coordinates.  The
    fitted log-log slope is a probe, not an estimate of the optimal exponent.
    """
    x0, x1, y0, y1 = (float(v) for v in region)
    bound = truncation_bound(s, n, lift)
    bound = math.inf if bound is None else bound
    sups = []
    for k, h in enumerate(scales):
        rng = rng_for(seed, k)
        t = rng.uniform(x0, x1, pairs) + 1j * rng.uniform(y0, y1, pairs)
        Z = chart_lift(chart, t)
        perp = np.stack([-np.conj(Z[:, 1]), np.conj(Z[:, 0])], axis=1)
        phase = np.exp(2j * np.pi * rng.random(pairs))
        W = np.cos(h) * Z + np.sin(h) * phase[:, None] * perp
        inc = np.abs(green_values(s, Z, n, lift) - green_values(s, W, n, lift))
        sups.append(float(inc.max()))
    if sups and bound > 0.5 * min(sups):
        raise InsufficientDepth(f"truncation bound {bound:.3g} exceeds half the smallest "
                                f"increment {min(sups):.3g}; increase n")
    beta = intercept = None
    if len(scales) >= 2:
        beta, intercept = (float(v) for v in np.polyfit(np.log(scales), np.log(sups), 1))
    return HolderReport([float(h) for h in scales], sups, beta, intercept, bound)
