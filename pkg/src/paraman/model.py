"""Problem model: sparse polynomials, norms, domains, map/field specs, documents.

A problem document describes a discrete map

    F(x, y) = (x + p(x, y) + f(x, y),  y + q(x, y) + g(x, y))

near a parabolic fixed point at the origin (DF(0,0) = Id), with p, q homogeneous
of degrees N, M and f, g of higher order, together with the star-shaped domain
V_rho on which everything is to be certified.  Flows use the same pieces as a
vector field plus optional T-periodic forcing.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfDomain, ParseError, ValidationError

__all__ = [
    "SparsePolynomial", "MatrixPoly", "Norm", "DomainSpec", "MapSpec",
    "FieldSpec", "RunOptions", "ProblemDocument", "load_problem",
    "dump_problem", "evaluate_map", "REMAINDER_REGISTRY",
]


# ---------------------------------------------------------------------------
# sparse polynomials
# ---------------------------------------------------------------------------

class SparsePolynomial:
    """Vector-valued polynomial stored as per-component exponent->coefficient maps.

    Parameters
    ----------
    arity : int
        Number of input variables.
    comps : sequence of dict
        One dict per output component, mapping exponent tuples (length `arity`,
        non-negative ints) to float coefficients.
    """

    def __init__(self, arity, comps):
        self.arity = int(arity)
        cleaned = []
        for comp in comps:
            d = {}
            for exps, c in comp.items():
                exps = tuple(int(e) for e in exps)
                if len(exps) != self.arity:
                    raise ValidationError(
                        f"exponent tuple {exps} has length {len(exps)}, expected {self.arity}")
                if any(e < 0 for e in exps):
                    raise ValidationError(f"negative exponent in {exps}")
                c = float(c)
                if c != 0.0:
                    d[exps] = d.get(exps, 0.0) + c
            cleaned.append({e: c for e, c in d.items() if c != 0.0})
        self.comps = tuple(cleaned)

    @property
    def out_dim(self):
        return len(self.comps)

    @classmethod
    def zero(cls, arity, out_dim):
        return cls(arity, [{} for _ in range(out_dim)])

    @classmethod
    def identity(cls, arity):
        """The map x -> x."""
        comps = []
        for i in range(arity):
            e = [0] * arity
            e[i] = 1
            comps.append({tuple(e): 1.0})
        return cls(arity, comps)

    def is_zero(self):
        return all(not c for c in self.comps)

    def degrees(self):
        """Set of total degrees present in any component."""
        out = set()
        for comp in self.comps:
            out.update(sum(e) for e in comp)
        return out

    def is_homogeneous(self, d=None):
        degs = self.degrees()
        if not degs:
            return True
        if len(degs) > 1:
            return False
        return True if d is None else degs == {d}

    def evaluate(self, pts):
        """Evaluate at pts of shape (..., arity); returns shape (..., out_dim)."""
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        flat = pts.reshape(-1, self.arity)
        out = np.zeros((flat.shape[0], self.out_dim))
        for i, comp in enumerate(self.comps):
            if not comp:
                continue
            exps = np.array(list(comp.keys()), dtype=float)        # (nterms, arity)
            coeffs = np.array(list(comp.values()))                 # (nterms,)
            mono = np.prod(flat[:, None, :] ** exps[None, :, :], axis=2)
            out[:, i] = mono @ coeffs
        out = out.reshape(pts.shape[:-1] + (self.out_dim,))
        return out[0] if single else out

    def partial(self, var):
        """Exact partial derivative with respect to input variable `var`."""
        comps = []
        for comp in self.comps:
            d = {}
            for exps, c in comp.items():
                k = exps[var]
                if k == 0:
                    continue
                e2 = list(exps)
                e2[var] = k - 1
                e2 = tuple(e2)
                d[e2] = d.get(e2, 0.0) + c * k
            comps.append(d)
        return SparsePolynomial(self.arity, comps)

    def jacobian(self, pts):
        """Exact Jacobian at pts (..., arity) -> (..., out_dim, arity)."""
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        cols = [self.partial(v).evaluate(pts) for v in range(self.arity)]
        jac = np.stack(cols, axis=-1)
        return jac[0] if single else jac

    def restrict_tail_zero(self, keep):
        """Set variables keep..arity-1 to zero; result has arity `keep`."""
        comps = []
        for comp in self.comps:
            d = {}
            for exps, c in comp.items():
                if any(e != 0 for e in exps[keep:]):
                    continue
                d[exps[:keep]] = d.get(exps[:keep], 0.0) + c
            comps.append(d)
        return SparsePolynomial(keep, comps)

    def component(self, i):
        return SparsePolynomial(self.arity, [self.comps[i]])

    def __add__(self, other):
        if self.arity != other.arity or self.out_dim != other.out_dim:
            raise ValidationError("polynomial shape mismatch in addition")
        comps = []
        for a, b in zip(self.comps, other.comps):
            d = dict(a)
            for e, c in b.items():
                d[e] = d.get(e, 0.0) + c
            comps.append(d)
        return SparsePolynomial(self.arity, comps)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, s):
        return SparsePolynomial(
            self.arity, [{e: s * c for e, c in comp.items()} for comp in self.comps])

    def mul_scalar_poly(self, other):
        """Multiply every component by a scalar polynomial (same arity)."""
        if other.out_dim != 1 or other.arity != self.arity:
            raise ValidationError("mul_scalar_poly needs a scalar polynomial of equal arity")
        comps = []
        for comp in self.comps:
            d = {}
            for e1, c1 in comp.items():
                for e2, c2 in other.comps[0].items():
                    e = tuple(a + b for a, b in zip(e1, e2))
                    d[e] = d.get(e, 0.0) + c1 * c2
            comps.append(d)
        return SparsePolynomial(self.arity, comps)

    def __eq__(self, other):
        return (isinstance(other, SparsePolynomial)
                and self.arity == other.arity and self.comps == other.comps)

    def __repr__(self):
        terms = sum(len(c) for c in self.comps)
        return f"SparsePolynomial(arity={self.arity}, out={self.out_dim}, terms={terms})"


class MatrixPoly:
    """Matrix with scalar-polynomial entries, e.g. a Jacobian block D_x p(x, 0)."""

    def __init__(self, entries):
        # entries: list of lists of scalar SparsePolynomial (out_dim == 1)
        self.entries = entries
        self.rows = len(entries)
        self.cols = len(entries[0]) if entries else 0
        arities = {p.arity for row in entries for p in row}
        if len(arities) > 1:
            raise ValidationError("mixed arities in MatrixPoly")
        self.arity = arities.pop() if arities else 0

    def evaluate(self, pts):
        """pts (..., arity) -> (..., rows, cols)."""
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = np.zeros(pts.shape[:-1] + (self.rows, self.cols))
        for i, row in enumerate(self.entries):
            for j, p in enumerate(row):
                out[..., i, j] = p.evaluate(pts)[..., 0]
        return out[0] if single else out

    def partial(self, var):
        return MatrixPoly([[p.partial(var) for p in row] for row in self.entries])

    def directional_partials(self):
        """List of d/dx_v of the matrix, one MatrixPoly per input variable."""
        return [self.partial(v) for v in range(self.arity)]

    def is_zero(self):
        return all(p.is_zero() for row in self.entries for p in row)

    def degrees(self):
        out = set()
        for row in self.entries:
            for p in row:
                out |= p.degrees()
        return out

    @classmethod
    def from_jacobian(cls, poly, wrt, fix_zero_from=None):
        """Jacobian block d(poly)/d(vars in `wrt`), optionally on {tail vars = 0}.

        `wrt` is a range of input-variable indices.  When fix_zero_from is
        given, the remaining variables from that index on are set to zero and
        the entries become polynomials in the first fix_zero_from variables.
        """
        entries = []
        for i in range(poly.out_dim):
            row = []
            for v in wrt:
                ent = poly.component(i).partial(v)
                if fix_zero_from is not None:
                    ent = ent.restrict_tail_zero(fix_zero_from)
                row.append(ent)
            entries.append(row)
        return cls(entries)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

class Norm:
    """A vector norm with its induced operator norm.

    kind 'max' is the sup norm (operator norm = max absolute row sum); kind
    'euclid' is the Euclidean norm (operator norm = largest singular value).
    Optional positive weights give the norm ||diag(w) v||_kind, with operator
    norm ||W A W^{-1}||.
    """

    def __init__(self, kind="max", weights=None):
        if kind not in ("max", "euclid"):
            raise ValidationError(f"unknown norm kind {kind!r}")
        self.kind = kind
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        if self.weights is not None and np.any(self.weights <= 0):
            raise ValidationError("norm weights must be positive")

    def vec(self, v, axis=-1):
        v = np.asarray(v, dtype=float)
        if self.weights is not None:
            v = v * self.weights
        if self.kind == "max":
            return np.abs(v).max(axis=axis)
        return np.sqrt((v * v).sum(axis=axis))

    def op(self, mats):
        """Operator norm of matrices shaped (..., r, c), both spaces this norm."""
        mats = np.asarray(mats, dtype=float)
        if self.weights is not None:
            w = self.weights
            mats = mats * w[:, None] / w[None, :]
        if self.kind == "max":
            return np.abs(mats).sum(axis=-1).max(axis=-1)
        return np.linalg.norm(mats, ord=2, axis=(-2, -1))

    def unit(self, v):
        v = np.asarray(v, dtype=float)
        return v / self.vec(v)

    def dual_vec(self, v, axis=-1):
        """Norm of a covector; used for exact distances to hyperplanes."""
        v = np.asarray(v, dtype=float)
        if self.weights is not None:
            v = v / self.weights
        if self.kind == "max":
            return np.abs(v).sum(axis=axis)
        return np.sqrt((v * v).sum(axis=axis))

    def spec(self):
        if self.weights is None:
            return self.kind
        return f"weighted-{self.kind}:" + ",".join(f"{w:g}" for w in self.weights)

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if ":" in text:
            head, tail = text.split(":", 1)
            if not head.startswith("weighted-"):
                raise ParseError(f"bad norm spec {text!r}")
            kind = head[len("weighted-"):]
            weights = [float(t) for t in tail.split(",")]
            return cls(kind, weights)
        return cls(text)

    def __eq__(self, other):
        if not isinstance(other, Norm):
            return NotImplemented
        wa = None if self.weights is None else tuple(self.weights)
        wb = None if other.weights is None else tuple(other.weights)
        return self.kind == other.kind and wa == wb


# ---------------------------------------------------------------------------
# domains and cross-section charts
# ---------------------------------------------------------------------------

class SectionChart:
    """1-parameter chart s -> direction(s) covering the unit section of a 2-d domain.

    For sector cones the parameter is the slope ratio s = x2 / (kappa x1) on
    (-1, 1); for punctured balls it is the angle on [0, 2pi) (periodic).
    """

    def __init__(self, kind, norm, lo, hi, periodic, direction_fn, param_fn):
        self.kind = kind
        self.norm = norm
        self.lo = float(lo)
        self.hi = float(hi)
        self.periodic = periodic
        self._direction = direction_fn
        self._param = param_fn

    def direction(self, s):
        """Map parameter(s) to unit-section points, shape (..., n)."""
        s = np.asarray(s, dtype=float)
        u = self._direction(s)
        return u

    def param_of(self, u):
        """Inverse chart: points (..., n) -> parameters."""
        return self._param(np.asarray(u, dtype=float))

    def wrap(self, s):
        if not self.periodic:
            return s
        span = self.hi - self.lo
        return self.lo + np.mod(np.asarray(s, dtype=float) - self.lo, span)

    @property
    def span(self):
        return self.hi - self.lo


class DomainSpec:
    """Star-shaped (with respect to 0) domain V_rho with its two norms.

    kinds
    -----
    'sector-cone'    {|x_2| < kappa x_1} intersect {||x|| < rho}, n = 2
    'punctured-ball' {0 < ||x|| < rho}, n = 2
    'ray'            (0, rho) in one dimension
    """

    def __init__(self, kind, n, rho, norm_x, norm_y=None, kappa=None, chart_margin=1e-3):
        self.kind = kind
        self.n = int(n)
        self.rho = float(rho)
        self.norm_x = norm_x
        self.norm_y = norm_y if norm_y is not None else Norm(norm_x.kind)
        self.kappa = None if kappa is None else float(kappa)
        self.chart_margin = float(chart_margin)
        if kind == "sector-cone":
            if self.n != 2 or self.kappa is None or not (0 < self.kappa):
                raise ValidationError("sector-cone needs n=2 and kappa > 0")
        elif kind == "punctured-ball":
            if self.n != 2:
                raise ValidationError("punctured-ball chart implemented for n=2")
        elif kind == "ray":
            if self.n != 1:
                raise ValidationError("ray domain is one-dimensional")
        else:
            raise ValidationError(f"unknown domain kind {kind!r}")

    # -- membership ---------------------------------------------------------

    def member_cone(self, x):
        """Membership in the radius-free homogeneous extension of V."""
        x = np.asarray(x, dtype=float)
        if self.kind == "sector-cone":
            return np.abs(x[..., 1]) < self.kappa * x[..., 0]
        if self.kind == "punctured-ball":
            return self.norm_x.vec(x) > 0
        return x[..., 0] > 0

    def member(self, x, rho=None):
        rho = self.rho if rho is None else rho
        x = np.asarray(x, dtype=float)
        r = self.norm_x.vec(x)
        return self.member_cone(x) & (r > 0) & (r < rho)

    def boundary_distance(self, x, rho=None):
        """Distance (in norm_x) from x to the complement of V_rho; <= 0 outside.

        Exact for the supported kinds: distance to the cone faces uses the dual
        norm of the face covector, the radial part is rho - ||x|| and, for the
        punctured ball, the puncture contributes ||x|| itself.
        """
        rho = self.rho if rho is None else rho
        x = np.asarray(x, dtype=float)
        r = self.norm_x.vec(x)
        radial = rho - r
        if self.kind == "punctured-ball":
            return np.minimum(radial, r)
        if self.kind == "ray":
            return np.minimum(radial, x[..., 0])
        # sector cone: faces x2 = +-kappa x1 with covectors (kappa, -+1)
        k = self.kappa
        cov = self.norm_x.dual_vec(np.array([k, 1.0]))
        face = (k * x[..., 0] - np.abs(x[..., 1])) / cov
        return np.minimum(radial, face)

    # -- cross-section chart --------------------------------------------------

    def section_chart(self):
        nx = self.norm_x
        if self.kind == "sector-cone":
            k = self.kappa

            def direction(s):
                s = np.atleast_1d(np.asarray(s, dtype=float))
                raw = np.stack([np.ones_like(s), k * s], axis=-1)
                u = raw / nx.vec(raw)[..., None]
                return u

            def param(u):
                u = np.atleast_2d(u)
                return u[..., 1] / (k * u[..., 0])

            return SectionChart("sector-cone", nx, -1.0, 1.0, False, direction, param)
        if self.kind == "punctured-ball":
            def direction(th):
                th = np.atleast_1d(np.asarray(th, dtype=float))
                raw = np.stack([np.cos(th), np.sin(th)], axis=-1)
                return raw / nx.vec(raw)[..., None]

            def param(u):
                u = np.atleast_2d(u)
                return np.mod(np.arctan2(u[..., 1], u[..., 0]), 2 * np.pi)

            return SectionChart("circle", nx, 0.0, 2 * np.pi, True, direction, param)
        # ray: single direction
        def direction(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            return np.ones(s.shape + (1,))

        def param(u):
            u = np.atleast_2d(u)
            return np.zeros(u.shape[:-1])

        return SectionChart("point", nx, 0.0, 0.0, False, direction, param)

    def spec_dict(self):
        d = {"kind": self.kind, "n": self.n, "rho": self.rho,
             "norm_x": self.norm_x.spec(), "norm_y": self.norm_y.spec()}
        if self.kappa is not None:
            d["kappa"] = self.kappa
        return d

    def __eq__(self, other):
        if not isinstance(other, DomainSpec):
            return NotImplemented
        return self.spec_dict() == other.spec_dict()


# ---------------------------------------------------------------------------
# map and field specs
# ---------------------------------------------------------------------------

REMAINDER_REGISTRY = {}


def register_remainder(name):
    def deco(fn):
        REMAINDER_REGISTRY[name] = fn
        return fn
    return deco


@dataclass
class MapSpec:
    """F(x, y) = (x + p + f, y + q + g) with p, q homogeneous of degree N, M.

    p and q have arity n + m (joint (x, y) variables); the higher-order pieces
    are stored as explicit homogeneous summands plus an optional named
    remainder of order > r from REMAINDER_REGISTRY.
    """

    n: int
    m: int
    N: int
    M: int
    r: int
    p: SparsePolynomial
    q: SparsePolynomial
    higher_x: list = field(default_factory=list)   # [(degree, SparsePolynomial)]
    higher_y: list = field(default_factory=list)
    remainder: str | None = None

    def __post_init__(self):
        k = self.n + self.m
        if self.N < 2 or self.M < 2:
            raise ValidationError("need N >= 2 and M >= 2 (parabolic normal form)")
        if self.p.arity != k or self.p.out_dim != self.n:
            raise ValidationError("p must map R^(n+m) -> R^n")
        if self.q.arity != k or self.q.out_dim != self.m:
            raise ValidationError("q must map R^(n+m) -> R^m")
        if not self.p.is_homogeneous(self.N) and not self.p.is_zero():
            raise ValidationError(f"p must be homogeneous of degree N={self.N}")
        if not self.q.is_homogeneous(self.M) and not self.q.is_zero():
            raise ValidationError(f"q must be homogeneous of degree M={self.M}")
        # q(x, 0) = 0: every monomial must carry positive total y-degree
        for comp in self.q.comps:
            for exps in comp:
                if all(e == 0 for e in exps[self.n:]):
                    raise ValidationError(
                        "q(x, 0) != 0: monomial with no y-dependence found")
        for d, poly in self.higher_x:
            if d <= self.N:
                raise ValidationError(f"higher x-piece at degree {d} <= N")
            if not poly.is_homogeneous(d):
                raise ValidationError(f"higher x-piece not homogeneous of degree {d}")
        for d, poly in self.higher_y:
            if d <= self.M:
                raise ValidationError(f"higher y-piece at degree {d} <= M")
            if not poly.is_homogeneous(d):
                raise ValidationError(f"higher y-piece not homogeneous of degree {d}")
        if self.remainder is not None and self.remainder not in REMAINDER_REGISTRY:
            raise ValidationError(f"unknown remainder {self.remainder!r}")

    @property
    def L(self):
        return min(self.N, self.M)

    # -- derived polynomial data ---------------------------------------------

    def pa(self):
        """p(x, 0): the leading field driving the x-dynamics."""
        return self.p.restrict_tail_zero(self.n)

    def q_y0(self):
        return self.q.restrict_tail_zero(self.n)

    def Dxp0(self):
        """D_x p(x, 0) as an n x n polynomial matrix (degree N-1 entries)."""
        return MatrixPoly.from_jacobian(self.p, range(self.n), fix_zero_from=self.n)

    def Dyp0(self):
        """D_y p(x, 0) as an n x m polynomial matrix."""
        return MatrixPoly.from_jacobian(
            self.p, range(self.n, self.n + self.m), fix_zero_from=self.n)

    def Dyq0(self):
        """D_y q(x, 0) as an m x m polynomial matrix (degree M-1 entries)."""
        return MatrixPoly.from_jacobian(
            self.q, range(self.n, self.n + self.m), fix_zero_from=self.n)

    def delta(self, z):
        """F(z) - z: the nonlinear part (p + f, q + g) at z = (x, y)."""
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + (self.n + self.m,))
        out[..., :self.n] += self.p.evaluate(z)
        out[..., self.n:] += self.q.evaluate(z)
        for _, poly in self.higher_x:
            out[..., :self.n] += poly.evaluate(z)
        for _, poly in self.higher_y:
            out[..., self.n:] += poly.evaluate(z)
        if self.remainder is not None:
            out += REMAINDER_REGISTRY[self.remainder](z)
        return out

    def evaluate(self, z):
        z = np.asarray(z, dtype=float)
        return z + self.delta(z)


@dataclass
class ForcingPiece:
    """One T-periodic forcing summand: poly(z) * trig(2 pi h t / T)."""

    block: str          # 'x' or 'y'
    degree: int
    harmonic: int       # h >= 0; h = 0 means a constant-in-t (mean) piece
    phase: str          # 'cos' or 'sin'
    poly: SparsePolynomial


@dataclass
class FieldSpec:
    """dz/dt = (p + f, q + g)(z) + periodic forcing, period T."""

    base: MapSpec
    period: float = 1.0
    forcing: list = field(default_factory=list)

    def __post_init__(self):
        if self.period <= 0:
            raise ValidationError("period must be positive")
        n, m = self.base.n, self.base.m
        N, M, L = self.base.N, self.base.M, self.base.L
        for fp in self.forcing:
            if fp.block not in ("x", "y"):
                raise ValidationError("forcing block must be 'x' or 'y'")
            if fp.phase not in ("cos", "sin"):
                raise ValidationError("forcing phase must be 'cos' or 'sin'")
            if not fp.poly.is_homogeneous(fp.degree):
                raise ValidationError("forcing piece not homogeneous of declared degree")
            want = n if fp.block == "x" else m
            if fp.poly.out_dim != want:
                raise ValidationError("forcing piece has wrong codomain")
            mean_like = fp.harmonic == 0
            if mean_like:
                floor = N if fp.block == "x" else M
                if fp.degree <= floor:
                    raise ValidationError(
                        f"mean forcing at degree {fp.degree} <= {floor} breaks the normal form")
            else:
                floor = N if fp.block == "x" else L
                if fp.degree < floor:
                    raise ValidationError(
                        f"oscillatory forcing below degree {floor} is not supported")

    def X(self, z, t):
        """Field value at (z, t); t scalar or broadcastable to z's batch shape."""
        z = np.asarray(z, dtype=float)
        out = self.base.delta(z)
        n = self.base.n
        w = 2 * np.pi / self.period
        for fp in self.forcing:
            trig = np.cos(fp.harmonic * w * t) if fp.phase == "cos" else np.sin(fp.harmonic * w * t)
            vals = fp.poly.evaluate(z) * np.asarray(trig)[..., None]
            if fp.block == "x":
                out[..., :n] += vals
            else:
                out[..., n:] += vals
        return out


def evaluate_map(spec, z):
    """Evaluate the map F at z = (x, y); batch-aware."""
    return spec.evaluate(z)


# ---------------------------------------------------------------------------
# run options and documents
# ---------------------------------------------------------------------------

@dataclass
class RunOptions:
    ell: int = 4
    strategy: str = "normal-form"    # 'normal-form' | 'free-kx'
    force: bool = False              # convergence-as-criterion mode
    force_zero_r: bool = False
    tail_tol: float = 1e-12
    ode_rtol: float = 1e-10
    nodes: int = 129
    extract_window: int = 4
    degree_cap_factor: int = 4
    harmonics: int = 16
    phases: int = 64
    slope_margin: float = 0.9

    def validate(self):
        if self.strategy not in ("normal-form", "free-kx"):
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.ell < 2:
            raise ValidationError("ell must be >= 2")
        if self.nodes < 9:
            raise ValidationError("need at least 9 section nodes")


@dataclass
class ProblemDocument:
    kind: str                     # 'map' or 'field'
    spec: object                  # MapSpec or FieldSpec
    domain: DomainSpec
    run: RunOptions
    name: str = "problem"

    @property
    def mapspec(self):
        return self.spec.base if self.kind == "field" else self.spec


# ---------------------------------------------------------------------------
# document grammar
# ---------------------------------------------------------------------------
#
# Sections in square brackets; monomial lines are "coeff e1 e2 ... ek" under
# per-component, per-degree headers.  See README for a worked example.

_HEADER_RE = re.compile(
    r"^component\s+(\d+)\s+degree\s+(\d+)"
    r"(?:\s+harmonic\s+(cos|sin)\s+(\d+))?$")


def _parse_kv(line, lineno):
    if "=" not in line:
        raise ParseError(f"expected 'key = value', got {line!r}", lineno)
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def load_problem(text, name="problem"):
    """Parse a problem document; raises ParseError / ValidationError."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ParseError(f"content outside any section: {line!r}", lineno)
        sections[current].append((lineno, line))

    if "map" in sections and "field" in sections:
        raise ParseError("document declares both [map] and [field]")
    if "map" not in sections and "field" not in sections:
        raise ParseError("document must declare [map] or [field]")
    kind = "map" if "map" in sections else "field"

    head = {}
    for lineno, line in sections[kind]:
        k, v = _parse_kv(line, lineno)
        head[k] = v
    try:
        n = int(head["n"]); m = int(head["m"])
        N = int(head["N"]); M = int(head["M"])
        r = int(head.get("r", max(N, M) + 2))
    except KeyError as exc:
        raise ParseError(f"[{kind}] missing key {exc}")
    except ValueError as exc:
        raise ParseError(f"[{kind}] bad integer: {exc}")

    k_vars = n + m

    def parse_block(section, out_dim, fixed_degree=None, allow_harmonic=False):
        """Parse monomial lines grouped under component/degree headers.

        Returns {(degree, harmonic, phase): comps-list-of-dicts}; harmonic is
        None for plain blocks.
        """
        blocks = {}
        comp = deg = None
        harm = None
        for lineno, line in sections.get(section, []):
            mheader = _HEADER_RE.match(line)
            if mheader:
                comp = int(mheader.group(1)) - 1
                deg = int(mheader.group(2))
                if mheader.group(3) is not None:
                    if not allow_harmonic:
                        raise ParseError(f"harmonic header not allowed in [{section}]", lineno)
                    harm = (mheader.group(3), int(mheader.group(4)))
                else:
                    harm = None
                if not (0 <= comp < out_dim):
                    raise ParseError(f"component {comp + 1} out of range in [{section}]", lineno)
                if fixed_degree is not None and deg != fixed_degree:
                    raise ParseError(
                        f"[{section}] must have degree {fixed_degree}, got {deg}", lineno)
                continue
            if comp is None:
                raise ParseError(f"monomial line before any header in [{section}]", lineno)
            parts = line.split()
            if len(parts) != 1 + k_vars:
                raise ParseError(
                    f"expected coeff + {k_vars} exponents, got {len(parts)} fields", lineno)
            try:
                coeff = float(parts[0])
                exps = tuple(int(t) for t in parts[1:])
            except ValueError as exc:
                raise ParseError(str(exc), lineno)
            if sum(exps) != deg:
                raise ParseError(
                    f"monomial degree {sum(exps)} does not match header degree {deg}", lineno)
            key = (deg, harm)
            comps = blocks.setdefault(key, [{} for _ in range(out_dim)])
            comps[comp][exps] = comps[comp].get(exps, 0.0) + coeff
        return blocks

    p_blocks = parse_block(f"{kind}.p", n, fixed_degree=N)
    q_blocks = parse_block(f"{kind}.q", m, fixed_degree=M)
    p = SparsePolynomial(k_vars, p_blocks.get((N, None), [{} for _ in range(n)]))
    q = SparsePolynomial(k_vars, q_blocks.get((M, None), [{} for _ in range(m)]))

    f_blocks = parse_block(f"{kind}.f", n, allow_harmonic=(kind == "field"))
    g_blocks = parse_block(f"{kind}.g", m, allow_harmonic=(kind == "field"))
    higher_x, higher_y, forcing = [], [], []
    for (deg, harm), comps in sorted(f_blocks.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        poly = SparsePolynomial(k_vars, comps)
        if harm is None:
            higher_x.append((deg, poly))
        else:
            forcing.append(ForcingPiece("x", deg, harm[1], harm[0], poly))
    for (deg, harm), comps in sorted(g_blocks.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        poly = SparsePolynomial(k_vars, comps)
        if harm is None:
            higher_y.append((deg, poly))
        else:
            forcing.append(ForcingPiece("y", deg, harm[1], harm[0], poly))

    remainder = None
    for lineno, line in sections.get(f"{kind}.remainder", []):
        key, v = _parse_kv(line, lineno)
        if key != "name":
            raise ParseError(f"unknown remainder key {key!r}", lineno)
        remainder = v

    base = MapSpec(n=n, m=m, N=N, M=M, r=r, p=p, q=q,
                   higher_x=higher_x, higher_y=higher_y, remainder=remainder)

    if kind == "field":
        period = float(head.get("period", 1.0))
        spec = FieldSpec(base=base, period=period, forcing=forcing)
    else:
        if any(True for _ in forcing):
            raise ValidationError("harmonic blocks only make sense for [field] documents")
        spec = base

    # domain
    if "domain" not in sections:
        raise ParseError("missing [domain] section")
    dom = {}
    for lineno, line in sections["domain"]:
        key, v = _parse_kv(line, lineno)
        dom[key] = v
    try:
        domain = DomainSpec(
            kind=dom["kind"],
            n=n,
            rho=float(dom["rho"]),
            norm_x=Norm.parse(dom.get("norm_x", "max")),
            norm_y=Norm.parse(dom.get("norm_y", dom.get("norm_x", "max"))),
            kappa=float(dom["kappa"]) if "kappa" in dom else None,
            chart_margin=float(dom.get("chart_margin", 1e-3)),
        )
    except KeyError as exc:
        raise ParseError(f"[domain] missing key {exc}")

    run = RunOptions()
    bool_keys = {"force", "force_zero_r"}
    int_keys = {"ell", "nodes", "extract_window", "degree_cap_factor", "harmonics", "phases"}
    float_keys = {"tail_tol", "ode_rtol", "slope_margin"}
    for lineno, line in sections.get("run", []):
        key, v = _parse_kv(line, lineno)
        key = key.replace("-", "_")
        if key in bool_keys:
            setattr(run, key, v.lower() in ("1", "true", "yes", "on"))
        elif key in int_keys:
            setattr(run, key, int(v))
        elif key in float_keys:
            setattr(run, key, float(v))
        elif key == "strategy":
            run.strategy = v
        else:
            raise ParseError(f"unknown [run] key {key!r}", lineno)
    run.validate()

    return ProblemDocument(kind=kind, spec=spec, domain=domain, run=run, name=name)


def _fmt_coeff(c):
    return f"{c:.17g}"


def dump_problem(doc):
    """Serialize a ProblemDocument back to canonical document text."""
    base = doc.mapspec
    k_vars = base.n + base.m
    lines = [f"[{doc.kind}]"]
    lines.append(f"n = {base.n}")
    lines.append(f"m = {base.m}")
    lines.append(f"N = {base.N}")
    lines.append(f"M = {base.M}")
    lines.append(f"r = {base.r}")
    if doc.kind == "field":
        lines.append(f"period = {doc.spec.period:.17g}")

    def block(section, poly, degree):
        if poly.is_zero():
            return
        lines.append(f"[{section}]")
        for i, comp in enumerate(poly.comps):
            if not comp:
                continue
            lines.append(f"component {i + 1} degree {degree}")
            for exps in sorted(comp):
                lines.append(_fmt_coeff(comp[exps]) + "   " + " ".join(str(e) for e in exps))

    block(f"{doc.kind}.p", base.p, base.N)
    block(f"{doc.kind}.q", base.q, base.M)

    def higher(section, pieces, forcing_block=None):
        header_written = False
        for d, poly in pieces:
            if poly.is_zero():
                continue
            if not header_written:
                lines.append(f"[{section}]")
                header_written = True
            for i, comp in enumerate(poly.comps):
                if not comp:
                    continue
                lines.append(f"component {i + 1} degree {d}")
                for exps in sorted(comp):
                    lines.append(_fmt_coeff(comp[exps]) + "   " + " ".join(str(e) for e in exps))
        if doc.kind == "field" and forcing_block is not None:
            for fp in doc.spec.forcing:
                if fp.block != forcing_block or fp.poly.is_zero():
                    continue
                if not header_written:
                    lines.append(f"[{section}]")
                    header_written = True
                for i, comp in enumerate(fp.poly.comps):
                    if not comp:
                        continue
                    lines.append(
                        f"component {i + 1} degree {fp.degree} harmonic {fp.phase} {fp.harmonic}")
                    for exps in sorted(comp):
                        lines.append(
                            _fmt_coeff(comp[exps]) + "   " + " ".join(str(e) for e in exps))

    higher(f"{doc.kind}.f", base.higher_x, "x")
    higher(f"{doc.kind}.g", base.higher_y, "y")
    if base.remainder is not None:
        lines.append(f"[{doc.kind}.remainder]")
        lines.append(f"name = {base.remainder}")

    lines.append("[domain]")
    for key, v in doc.domain.spec_dict().items():
        if key == "n":
            continue
        lines.append(f"{key} = {v}")
    lines.append("[run]")
    r = doc.run
    lines.append(f"ell = {r.ell}")
    lines.append(f"strategy = {r.strategy}")
    lines.append(f"force = {str(r.force).lower()}")
    lines.append(f"force_zero_r = {str(r.force_zero_r).lower()}")
    lines.append(f"tail_tol = {r.tail_tol:g}")
    lines.append(f"ode_rtol = {r.ode_rtol:g}")
    lines.append(f"nodes = {r.nodes}")
    lines.append(f"extract_window = {r.extract_window}")
    lines.append(f"slope_margin = {r.slope_margin:g}")
    return "\n".join(lines) + "\n"
