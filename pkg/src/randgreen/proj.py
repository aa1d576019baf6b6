"""Points of the Riemann sphere and degree-d rational maps in homogeneous form.

A point is a unit vector ``(x, y)`` in C^2 representing ``[x:y]``; the affine
coordinate is ``z = x / y``.  A map is a pair of binary forms

    P(X, Y) = sum_i p[i] X^i Y^(d-i),    Q(X, Y) = sum_i q[i] X^i Y^(d-i)

with the joint coefficient vector scaled to unit Euclidean norm.  The norm of
the coefficients as originally supplied is kept in ``RationalMap.scale`` so
that the "given" lift (e.g. ``(X^2, Y^2)`` for ``z^2``) can be recovered.

Vectorized kernels work on complex arrays of shape ``(N, 2)``; the scalar API
(`evaluate`, `preimages`, ...) wraps them.
"""
from __future__ import annotations

import ast
import functools
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import numpy.polynomial.polynomial as npoly
from scipy.optimize import minimize

from .errors import DegenerateEvaluation, RootSolverFailure

ROOT_TOL = 1e-9
CLUSTER_TOL = 1e-8
# multiplicative safety factor applied to the refined grid minimum
MIN_NORM_SAFETY = 0.999
_UNDERFLOW = 1e-300

LIFTS = ("normalized", "given")


# ----------------------------------------------------------------------------
# points
# ----------------------------------------------------------------------------

def normalize_rows(Z):
    """Scale each row of an ``(N, 2)`` complex array to unit norm."""
    Z = np.asarray(Z, dtype=complex)
    return Z / np.linalg.norm(Z, axis=-1, keepdims=True)


@dataclass(frozen=True)
class PointP1:
    """A point ``[x:y]`` of P^1, stored as a unit vector (phase is arbitrary)."""

    x: complex
    y: complex

    def __post_init__(self):
        x, y = complex(self.x), complex(self.y)
        r = math.hypot(abs(x), abs(y))
        if not r > 0 or not math.isfinite(r):
            raise ValueError("homogeneous coordinates must be finite and not both zero")
        object.__setattr__(self, "x", x / r)
        object.__setattr__(self, "y", y / r)

    @classmethod
    def from_affine(cls, z) -> "PointP1":
        if z == math.inf or (isinstance(z, complex) and math.isinf(abs(z))):
            return cls(1, 0)
        return cls(complex(z), 1)

    @classmethod
    def from_vec(cls, v) -> "PointP1":
        return cls(complex(v[0]), complex(v[1]))

    @classmethod
    def infinity(cls) -> "PointP1":
        return cls(1, 0)

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=complex)

    @property
    def affine(self) -> complex:
        """Affine coordinate ``x / y`` (``inf`` at ``[1:0]``)."""
        if self.y == 0:
            return complex(math.inf, 0)
        return self.x / self.y


def fs_distance_arr(Z, W):
    """Fubini-Study distance ``arccos |<Z, W>|`` between rows of unit arrays.

    Evaluated as ``atan2(|det|, |<Z, W>|)`` which stays accurate for nearby
    points, where ``arccos`` loses half the significant digits.
    """
    Z = np.asarray(Z, dtype=complex)
    W = np.asarray(W, dtype=complex)
    inner = np.abs(Z[..., 0] * np.conj(W[..., 0]) + Z[..., 1] * np.conj(W[..., 1]))
    det = np.abs(Z[..., 0] * W[..., 1] - Z[..., 1] * W[..., 0])
    return np.arctan2(det, inner)


def fs_distance(z: PointP1, w: PointP1) -> float:
    return float(fs_distance_arr(z.vec, w.vec))


def random_unitary(rng, scale=None):
    """Random 2x2 unitary: Haar if ``scale`` is None, else ``exp(i scale H)``
    for a random Hermitian ``H`` (close to the identity for small scale)."""
    A = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    if scale is None:
        Q, R = np.linalg.qr(A)
        return Q * (np.diag(R) / np.abs(np.diag(R)))
    w, V = np.linalg.eigh((A + A.conj().T) / 2)
    return (V * np.exp(1j * scale * w)) @ V.conj().T


# ----------------------------------------------------------------------------
# maps
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RationalMap:
    """Degree-d endomorphism ``[P:Q]`` of P^1 with unit-norm coefficients."""

    d: int
    p: Tuple[complex, ...]
    q: Tuple[complex, ...]
    scale: float = field(default=1.0, compare=False)

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise ValueError("degree must be at least 1")
        p = tuple(complex(c) for c in self.p)
        q = tuple(complex(c) for c in self.q)
        if len(p) != d + 1 or len(q) != d + 1:
            raise ValueError(f"expected {d + 1} coefficients per form")
        norm = math.sqrt(sum(abs(c) ** 2 for c in p + q))
        if not norm > 0 or not math.isfinite(norm):
            raise ValueError("coefficient vector must be finite and nonzero")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "p", tuple(c / norm for c in p))
        object.__setattr__(self, "q", tuple(c / norm for c in q))
        object.__setattr__(self, "scale", float(self.scale) * norm)

    @classmethod
    def from_forms(cls, p: Sequence[complex], q: Sequence[complex]) -> "RationalMap":
        """Build from (unnormalized) coefficient lists of ``X^i Y^(d-i)``."""
        return cls(len(p) - 1, tuple(p), tuple(q))

    @classmethod
    def polynomial(cls, coeffs: Sequence[complex]) -> "RationalMap":
        """Affine polynomial ``sum_i c_i z^i`` lifted to ``(sum c_i X^i Y^(d-i), Y^d)``."""
        c = list(coeffs)
        d = len(c) - 1
        q = [0] * (d + 1)
        q[0] = 1
        return cls(d, tuple(c), tuple(q))

    @classmethod
    def quadratic(cls, c: complex = 0.0) -> "RationalMap":
        """The family ``z^2 + c``."""
        return cls.polynomial([c, 0, 1])

    @property
    def coeffs(self) -> np.ndarray:
        """Normalized coefficients as a ``(2, d+1)`` array."""
        return np.array([self.p, self.q], dtype=complex)

    def lift_coeffs(self, lift: str = "normalized") -> np.ndarray:
        if lift == "normalized":
            return self.coeffs
        if lift == "given":
            return self.coeffs * self.scale
        raise ValueError(f"unknown lift {lift!r}; expected one of {LIFTS}")

    def to_record(self) -> str:
        """Plain-text record ``d=..; P=re,im ...; Q=...`` (given lift)."""
        C = self.lift_coeffs("given")
        fmt = lambda row: " ".join(f"{float(c.real)!r},{float(c.imag)!r}" for c in row)
        return f"d={self.d}; P={fmt(C[0])}; Q={fmt(C[1])}"

    @classmethod
    def from_record(cls, text: str) -> "RationalMap":
        parts = {}
        for chunk in text.strip().split(";"):
            key, _, val = chunk.partition("=")
            parts[key.strip()] = val.strip()
        try:
            d = int(parts["d"])
            forms = []
            for key in ("P", "Q"):
                coeffs = [complex(float(a), float(b))
                          for a, b in (pair.split(",") for pair in parts[key].split())]
                forms.append(coeffs)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed map record {text!r}") from exc
        if len(forms[0]) != d + 1 or len(forms[1]) != d + 1:
            raise ValueError(f"map record {text!r}: expected {d + 1} coefficients per form")
        return cls(d, tuple(forms[0]), tuple(forms[1]))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_record().encode()).hexdigest()[:16]

    def __str__(self):
        return self.to_record()


# ----------------------------------------------------------------------------
# map shorthand parser, e.g. "z^2 - 0.1", "z^2 + (0.3+0.5i)", "(z^2+1)/(2z)"
# ----------------------------------------------------------------------------

_NUM_I = re.compile(r"(?<![\w.])(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)i\b")
_BARE_I = re.compile(r"(?<![\w.])i\b")
_IMPLICIT = re.compile(r"(\d|\)|j)\s*(?=[z(])")


def _poly_value(node):
    """Evaluate an AST node to a (numerator, denominator) pair of coefficient arrays."""
    one = np.array([1.0 + 0j])
    if isinstance(node, ast.Expression):
        return _poly_value(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, complex)):
        return np.array([complex(node.value)]), one
    if isinstance(node, ast.Name) and node.id == "z":
        return np.array([0j, 1.0]), one
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        n, d = _poly_value(node.operand)
        return (-n if isinstance(node.op, ast.USub) else n), d
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            if not (isinstance(node.right, ast.Constant) and isinstance(node.right.value, int)
                    and node.right.value >= 0):
                raise ValueError("exponents must be non-negative integer literals")
            n, d = _poly_value(node.left)
            k = node.right.value
            return npoly.polypow(n, k), npoly.polypow(d, k)
        an, ad = _poly_value(node.left)
        bn, bd = _poly_value(node.right)
        if isinstance(node.op, ast.Add):
            return npoly.polyadd(npoly.polymul(an, bd), npoly.polymul(bn, ad)), npoly.polymul(ad, bd)
        if isinstance(node.op, ast.Sub):
            return npoly.polysub(npoly.polymul(an, bd), npoly.polymul(bn, ad)), npoly.polymul(ad, bd)
        if isinstance(node.op, ast.Mult):
            return npoly.polymul(an, bn), npoly.polymul(ad, bd)
        if isinstance(node.op, ast.Div):
            return npoly.polymul(an, bd), npoly.polymul(ad, bn)
    raise ValueError(f"unsupported syntax in map expression: {ast.dump(node)}")


def _trim(c, tol=0.0):
    c = np.atleast_1d(np.asarray(c, dtype=complex))
    k = len(c) - 1
    while k > 0 and abs(c[k]) <= tol:
        k -= 1
    return c[:k + 1]


def parse_map(text: str) -> RationalMap:
    """Parse an affine shorthand such as ``"z^2 - 0.1"`` or a ``to_record`` string.

    Complex constants are written ``a+bi``; rational expressions are allowed.
    The lift is ``(Y^d num(X/Y), Y^d den(X/Y))`` with ``d = max(deg num, deg den)``.
    """
    s = text.strip()
    if s.startswith("d="):
        return RationalMap.from_record(s)
    expr = _NUM_I.sub(r"\1j", s)
    expr = _BARE_I.sub("1j", expr)
    expr = _IMPLICIT.sub(r"\1*", expr)
    expr = expr.replace("^", "**")
    try:
        tree = ast.parse(expr, mode="eval")
        num, den = _poly_value(tree)
    except SyntaxError as exc:
        raise ValueError(f"cannot parse map expression {text!r}") from exc
    num, den = _trim(num), _trim(den)
    d = max(len(num), len(den)) - 1
    if d < 1:
        raise ValueError(f"map {text!r} has degree < 1")
    p = np.zeros(d + 1, dtype=complex)
    q = np.zeros(d + 1, dtype=complex)
    p[:len(num)] = num
    q[:len(den)] = den
    return RationalMap(d, tuple(p), tuple(q))


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def _monomials(Z, d):
    """``(N, d+1)`` array of ``x^i y^(d-i)``."""
    x = Z[..., 0:1]
    y = Z[..., 1:2]
    i = np.arange(d + 1)
    return x ** i * y ** (d - i)


def lift_eval(C, Z):
    """Apply the homogeneous lift with coefficients ``C`` to points ``Z``.

    ``C`` has shape ``(2, d+1)`` (one map) or ``(N, 2, d+1)`` (one map per
    point).  Returns the unnormalized images, shape ``(N, 2)``.
    """
    C = np.asarray(C, dtype=complex)
    Z = np.atleast_2d(np.asarray(Z, dtype=complex))
    d = C.shape[-1] - 1
    M = _monomials(Z, d)
    if C.ndim == 2:
        return M @ C.T
    return np.einsum("nk,njk->nj", M, C)


def evaluate(f: RationalMap, z: PointP1) -> PointP1:
    W = lift_eval(f.coeffs, z.vec[None, :])[0]
    n = float(np.linalg.norm(W))
    if n <= _UNDERFLOW or (n < 1e-13 and dist_to_degenerate(f) < 1e-8):
        raise DegenerateEvaluation(f"both forms vanish at {z}")
    return PointP1.from_vec(W)


def compose_linear(f: RationalMap, A) -> RationalMap:
    """Coefficients of ``A_out @ f(A_in @ Z)`` for ``A = (A_out, A_in)`` 2x2 matrices."""
    A_out, A_in = (np.asarray(m, dtype=complex) for m in A)
    d = f.d
    (a, b), (c, e) = A_in
    # X' = aX + bY, Y' = cX + eY; dehomogenize at Y = 1
    xs = np.array([b, a])
    ys = np.array([e, c])
    forms = []
    for coeffs in (f.p, f.q):
        acc = np.zeros(d + 1, dtype=complex)
        for i, ci in enumerate(coeffs):
            term = npoly.polymul(npoly.polypow(xs, i), npoly.polypow(ys, d - i))
            acc[:len(term)] += ci * term
        forms.append(acc)
    P, Q = forms
    newP = A_out[0, 0] * P + A_out[0, 1] * Q
    newQ = A_out[1, 0] * P + A_out[1, 1] * Q
    return RationalMap(d, tuple(newP), tuple(newQ))


def conjugate(f: RationalMap, U) -> RationalMap:
    """``U f U^{-1}`` for a 2x2 unitary ``U``."""
    U = np.asarray(U, dtype=complex)
    return compose_linear(f, (U, U.conj().T))


# ----------------------------------------------------------------------------
# resultant / distance to the degenerate locus
# ----------------------------------------------------------------------------

def sylvester_matrix(p, q) -> np.ndarray:
    """``2d x 2d`` Sylvester matrix of two formal degree-d polynomials.

    ``p[i]`` is the coefficient of ``z^i``; rows list coefficients from the
    highest power down, P-rows first.
    """
    p = np.asarray(p, dtype=complex)[::-1]
    q = np.asarray(q, dtype=complex)[::-1]
    d = len(p) - 1
    S = np.zeros((2 * d, 2 * d), dtype=complex)
    for r in range(d):
        S[r, r:r + d + 1] = p
        S[d + r, r:r + d + 1] = q
    return S


def resultant(f: RationalMap, lift: str = "normalized") -> complex:
    C = f.lift_coeffs(lift)
    return complex(np.linalg.det(sylvester_matrix(C[0], C[1])))


def dist_to_degenerate(f: RationalMap) -> float:
    """Proxy ``|Res|^(1/(2d))`` for the distance from ``f`` to the degenerate locus."""
    return abs(resultant(f)) ** (1.0 / (2 * f.d))


def min_norm_lower_bound(delta: float, d: int) -> float:
    """Certified lower bound on ``min_{|Z|=1} |f(Z)|`` for a unit-coefficient map.

    From ``Res * X^(2d-1), Res * Y^(2d-1) in (P, Q)`` with cofactor
    coefficients bounded by Hadamard's inequality.
    """
    return delta ** (2 * d) * 2.0 ** (-(2 * d - 1) / 2) / math.sqrt(2 * d)


def _sphere_point(t, phi):
    return np.stack([np.cos(t) + 0j, np.sin(t) * np.exp(1j * phi)], axis=-1)


@functools.lru_cache(maxsize=4096)
def _min_sphere_norm_cached(C_bytes, d, grid):
    C = np.frombuffer(C_bytes, dtype=complex).reshape(2, d + 1)
    t = np.linspace(0.0, np.pi / 2, grid + 1)
    phi = np.linspace(0.0, 2 * np.pi, 2 * grid, endpoint=False)
    T, PHI = np.meshgrid(t, phi, indexing="ij")
    Z = _sphere_point(T.ravel(), PHI.ravel())
    vals = np.linalg.norm(lift_eval(C, Z), axis=1)
    best = float(vals.min())
    if best <= 1e-12:
        return best
    order = np.argsort(vals)[:4]
    fun = lambda v: float(np.linalg.norm(lift_eval(C, _sphere_point(v[0], v[1])[None, :])))
    for k in order:
        res = minimize(fun, [T.ravel()[k], PHI.ravel()[k]], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        best = min(best, float(res.fun))
    return best


def min_sphere_norm(f: RationalMap, grid: int = 48, lift: str = "normalized") -> float:
    """Estimate of ``min_{|Z|=1} ||(P(Z), Q(Z))||`` (times ``MIN_NORM_SAFETY``).

    Grid search over the sphere modulo the diagonal phase, followed by
    Nelder-Mead refinement from the four best grid points.
    """
    C = np.ascontiguousarray(f.lift_coeffs(lift))
    return MIN_NORM_SAFETY * _min_sphere_norm_cached(C.tobytes(), f.d, int(grid))


# ----------------------------------------------------------------------------
# pre-images
# ----------------------------------------------------------------------------

def _horner(C, t):
    """Evaluate ``sum_k C[:, k] t^k`` and its derivative; ``t`` has shape (N, m)."""
    d = C.shape[1] - 1
    val = np.broadcast_to(C[:, d:d + 1], t.shape).astype(complex)
    der = np.zeros_like(val)
    for k in range(d - 1, -1, -1):
        der = der * t + val
        val = val * t + C[:, k:k + 1]
    return val, der


def binary_form_roots(R, newton: int | None = None):
    """All roots in P^1 of binary forms ``sum_i R[:, i] X^i Y^(d-i)``.

    Returns unit vectors of shape ``(N, d, 2)``, listed with multiplicity.
    The form is dehomogenized in the chart whose leading coefficient is the
    larger in modulus, so no root sits at infinity of that chart.
    """
    R = np.atleast_2d(np.asarray(R, dtype=complex))
    N, d1 = R.shape
    d = d1 - 1
    swap = np.abs(R[:, d]) < np.abs(R[:, 0])
    C = np.where(swap[:, None], R[:, ::-1], R)
    lead = C[:, d]
    if np.any(lead == 0):
        raise RootSolverFailure("binary form vanishes identically (degenerate map)")
    if d == 1:
        t = (-C[:, 0] / C[:, 1])[:, None]
    elif d == 2:
        a, b, c = C[:, 2], C[:, 1], C[:, 0]
        s = np.sqrt(b * b - 4 * a * c)
        plus = np.abs(b + s) >= np.abs(b - s)
        qq = -0.5 * np.where(plus, b + s, b - s)
        safe = qq != 0
        t1 = qq / a
        t2 = np.where(safe, c / np.where(safe, qq, 1), t1)
        t = np.stack([t1, t2], axis=1)
    else:
        comp = np.zeros((N, d, d), dtype=complex)
        comp[:, np.arange(1, d), np.arange(d - 1)] = 1.0
        comp[:, :, -1] = -C[:, :d] / lead[:, None]
        t = np.linalg.eigvals(comp)
    if newton is None:
        newton = 0 if d <= 2 else 2
    for _ in range(newton):
        val, der = _horner(C, t)
        ok = np.abs(der) > 1e-13 * np.abs(lead)[:, None] * (1 + np.abs(t)) ** (d - 1)
        step = np.where(ok, val / np.where(ok, der, 1), 0)
        t_new = t - step
        val_new, _ = _horner(C, t_new)
        t = np.where(np.abs(val_new) <= np.abs(val), t_new, t)
    one = np.ones_like(t)
    pts = np.where(swap[:, None, None],
                   np.stack([one, t], axis=-1),
                   np.stack([t, one], axis=-1))
    return pts / np.linalg.norm(pts, axis=-1, keepdims=True)


def preimage_form(C, X):
    """Coefficients of ``b P - a Q`` for targets ``X = [a:b]``; shape ``(N, d+1)``."""
    C = np.asarray(C, dtype=complex)
    X = np.atleast_2d(X)
    a = X[:, 0:1]
    b = X[:, 1:2]
    if C.ndim == 2:
        return b * C[0][None, :] - a * C[1][None, :]
    return b * C[:, 0, :] - a * C[:, 1, :]


def preimage_roots(C, X, newton=None):
    """All pre-images (with multiplicity) of each target row of ``X``: ``(N, d, 2)``."""
    return binary_form_roots(preimage_form(C, X), newton=newton)


@dataclass(frozen=True)
class PreimageSet:
    """Pre-images of a point, clustered into multiplicities summing to ``d``."""

    points: Tuple[Tuple[PointP1, int], ...]

    @property
    def total_multiplicity(self) -> int:
        return sum(m for _, m in self.points)

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


def cluster_points(V, tol=CLUSTER_TOL) -> List[Tuple[np.ndarray, int]]:
    """Greedy clustering of unit vectors (rows of ``V``) by FS distance."""
    clusters: List[List[np.ndarray]] = []
    for v in V:
        for cl in clusters:
            if fs_distance_arr(cl[0], v) <= tol:
                cl.append(v)
                break
        else:
            clusters.append([v])
    out = []
    for cl in clusters:
        ref = cl[0]
        # align phases before averaging
        acc = sum(w * np.exp(-1j * np.angle(np.vdot(ref, w))) for w in cl)
        out.append((acc / np.linalg.norm(acc), len(cl)))
    return out


def preimages(f: RationalMap, x: PointP1, root_tol: float = ROOT_TOL,
              cluster_tol: float = CLUSTER_TOL) -> PreimageSet:
    """Pre-images of ``x`` under ``f`` with multiplicities."""
    roots = preimage_roots(f.coeffs, x.vec[None, :], newton=2)[0]
    images = normalize_rows(lift_eval(f.coeffs, roots))
    resid = fs_distance_arr(images, x.vec[None, :])
    if not np.all(resid <= root_tol):
        raise RootSolverFailure(
            f"pre-image residual {float(resid.max()):.3g} exceeds {root_tol:g}")
    pts = tuple((PointP1.from_vec(v), m) for v, m in cluster_points(roots, cluster_tol))
    return PreimageSet(pts)
