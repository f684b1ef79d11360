"""Graded (degree-by-degree) function machinery.

A homogeneous term of degree d is determined by its values on the unit
cross-section Sigma = V intersect {||x|| = 1}: h(x) = ||x||^d h(x / ||x||).
Terms come in several kinds -- exact polynomials, closed-form callables,
lazy callables (quadrature per evaluation) and section interpolants (values
on a chart grid plus a cubic spline).  Lazy terms are normally materialized
to interpolants immediately; direct evaluation stays available for
cross-checks.

extract_homogeneous separates the homogeneous components of a function from
evaluations along radial ladders: on each section node u it fits
f(lam * u) ~ sum_d lam^d c_d(u) by (weighted) least squares over a geometric
ladder of radii.  Rows are weighted by lam^{-d_min}, which makes the fit
relative to the leading degree and suppresses contamination from the o(max)
rest, whose influence then enters at order lam_min^{window+1}.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    DegreeOverflow, FitResidualTooLarge, IllConditionedExtraction, NearBoundary,
    OutOfDomain, StaleInterpolant, ValidationError,
)
from .model import SparsePolynomial

__all__ = [
    "CrossSectionGrid", "HomogeneousTerm", "GradedFunction",
    "extract_homogeneous", "differentiate_term", "eval_term", "materialize",
    "homogeneous_exponents", "polynomial_reconstruction",
]

RESIDUAL_FLOOR = 1e-13


class CrossSectionGrid:
    """Nodes on the unit cross-section of a domain, with a version counter.

    Interpolants remember the version they were built against; rebuilding the
    grid invalidates them (StaleInterpolant on evaluation).
    """

    def __init__(self, domain, n_nodes=129):
        self.domain = domain
        self.chart = domain.section_chart()
        self.version = 0
        self._build(n_nodes)

    def _build(self, n_nodes):
        chart = self.chart
        n_nodes = int(n_nodes)
        if chart.kind == "point":
            self.params = np.zeros(1)
        elif chart.periodic:
            self.params = np.linspace(chart.lo, chart.hi, n_nodes, endpoint=False)
        else:
            m = self.domain.chart_margin
            self.params = np.linspace(chart.lo + m, chart.hi - m, n_nodes)
        self.n_nodes = len(self.params)
        self.directions = chart.direction(self.params)

    def rebuild(self, n_nodes):
        """Re-node the grid in place; existing interpolants become stale."""
        self._build(n_nodes)
        self.version += 1

    def midpoint_params(self, count=None):
        p = self.params
        if len(p) == 1:
            return p.copy()
        if self.chart.periodic:
            mids = p + 0.5 * (self.chart.span / len(p))
        else:
            mids = 0.5 * (p[:-1] + p[1:])
        if count is not None and count < len(mids):
            idx = np.linspace(0, len(mids) - 1, count).round().astype(int)
            mids = mids[np.unique(idx)]
        return mids

    def coverage(self):
        """Covered parameter range (closed) for non-periodic charts."""
        return self.params[0], self.params[-1]


class _Interp:
    """Cubic spline over section nodes, pinned to a grid version."""

    def __init__(self, grid, values):
        self.grid = grid
        self.version = grid.version
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        p = grid.params
        if len(p) == 1:
            self.spline = None
        elif grid.chart.periodic:
            pp = np.concatenate([p, [p[0] + grid.chart.span]])
            vv = np.vstack([self.values, self.values[:1]])
            self.spline = CubicSpline(pp, vv, bc_type="periodic")
        else:
            self.spline = CubicSpline(p, self.values)

    def __call__(self, s):
        if self.grid.version != self.version:
            raise StaleInterpolant(
                f"grid rebuilt (version {self.grid.version}, interpolant at {self.version})")
        s = np.asarray(s, dtype=float)
        if self.spline is None:
            return np.broadcast_to(self.values[0], s.shape + (self.values.shape[1],)).copy()
        if self.grid.chart.periodic:
            s = self.grid.chart.wrap(s)
        return self.spline(s)


class HomogeneousTerm:
    """One homogeneous component h, of known degree, with an evaluation backend.

    kind 'zero' | 'polynomial' | 'closed-form' | 'lazy' | 'interpolant'.
    error_bound is an absolute bound on the unit section (scales as r^degree).
    """

    def __init__(self, degree, dim_in, dim_out, kind, payload=None,
                 error_bound=0.0, meta=None, jac=None):
        self.degree = int(degree)
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self.kind = kind
        self.payload = payload
        self.error_bound = float(error_bound)
        self.meta = meta or {}
        self.jac = jac    # optional exact jacobian callable (closed-form terms)
        if kind == "polynomial":
            if not isinstance(payload, SparsePolynomial):
                raise ValidationError("polynomial term needs a SparsePolynomial payload")
            if not payload.is_homogeneous(self.degree):
                raise ValidationError(
                    f"payload degrees {payload.degrees()} != declared {self.degree}")

    @classmethod
    def zero(cls, degree, dim_in, dim_out):
        return cls(degree, dim_in, dim_out, "zero")

    @classmethod
    def from_poly(cls, poly, degree):
        return cls(degree, poly.arity, poly.out_dim, "polynomial", poly)

    def is_zero(self):
        return self.kind == "zero"

    def __repr__(self):
        return (f"HomogeneousTerm(degree={self.degree}, kind={self.kind!r}, "
                f"out={self.dim_out}, err={self.error_bound:.2e})")


def eval_term(term, pts):
    """Evaluate a homogeneous term at pts (..., dim_in) -> (..., dim_out)."""
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if term.kind == "zero":
        out = np.zeros(pts.shape[:-1] + (term.dim_out,))
        return out[0] if single else out
    if term.kind == "polynomial":
        out = term.payload.evaluate(pts)
        return out[0] if single else out
    if term.kind in ("closed-form", "lazy"):
        out = term.payload(pts)
        out = np.asarray(out, dtype=float).reshape(pts.shape[:-1] + (term.dim_out,))
        return out[0] if single else out
    if term.kind == "interpolant":
        interp = term.payload
        grid = interp.grid
        norm = grid.domain.norm_x
        r = norm.vec(pts)
        if np.any(r <= 0):
            raise OutOfDomain("interpolant term evaluated at the origin")
        u = pts / r[..., None]
        s = grid.chart.param_of(u)
        if not grid.chart.periodic and grid.chart.kind != "point":
            lo_cov, hi_cov = grid.coverage()
            if np.any(s < grid.chart.lo) or np.any(s > grid.chart.hi):
                raise OutOfDomain("direction outside the section chart")
            if np.any(s < lo_cov) or np.any(s > hi_cov):
                worst = float(np.max(np.maximum(lo_cov - s, s - hi_cov)))
                raise NearBoundary(
                    f"direction {worst:.2e} beyond covered chart range "
                    f"[{lo_cov:.6f}, {hi_cov:.6f}]")
        vals = interp(s)
        out = vals * (r ** term.degree)[..., None]
        return out[0] if single else out
    raise ValidationError(f"unknown term kind {term.kind!r}")


def differentiate_term(term, pts, step_rel=1e-5):
    """Jacobian of a term at pts: (..., dim_out, dim_in).

    Polynomials differentiate exactly; closed forms use their exact jacobian
    when one was attached; everything else falls back to central differences
    with step 1e-5 * ||x|| per point.
    """
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if term.kind == "zero":
        out = np.zeros(pts.shape[:-1] + (term.dim_out, term.dim_in))
        return out[0] if single else out
    if term.kind == "polynomial":
        out = term.payload.jacobian(pts)
        return out[0] if single else out
    if term.jac is not None:
        out = np.asarray(term.jac(pts), dtype=float)
        out = out.reshape(pts.shape[:-1] + (term.dim_out, term.dim_in))
        return out[0] if single else out
    flat = pts.reshape(-1, term.dim_in)
    scale = np.abs(flat).max(axis=1)
    scale[scale == 0] = 1.0
    h = step_rel * scale
    cols = []
    for j in range(term.dim_in):
        dx = np.zeros_like(flat)
        dx[:, j] = h
        cols.append((eval_term(term, flat + dx) - eval_term(term, flat - dx)) / (2 * h)[:, None])
    jac = np.stack(cols, axis=-1)
    return jac.reshape(pts.shape[:-1] + (term.dim_out, term.dim_in))[0] if single \
        else jac.reshape(pts.shape[:-1] + (term.dim_out, term.dim_in))


class GradedFunction:
    """A finite sum of homogeneous terms, indexed by degree."""

    def __init__(self, dim_in, dim_out, terms=None):
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self.terms = {}            # degree -> list of HomogeneousTerm
        for t in terms or []:
            self.add_term(t)

    def add_term(self, term):
        if term.dim_in != self.dim_in or term.dim_out != self.dim_out:
            raise ValidationError("term shape does not match graded function")
        if term.is_zero():
            return
        self.terms.setdefault(term.degree, []).append(term)

    def degrees(self):
        return sorted(self.terms)

    def term_list(self):
        return [t for d in self.degrees() for t in self.terms[d]]

    def evaluate(self, pts, include_identity=False):
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = np.zeros(pts.shape[:-1] + (self.dim_out,))
        if include_identity:
            if self.dim_in != self.dim_out:
                raise ValidationError("identity part needs dim_in == dim_out")
            out += pts
        for terms in self.terms.values():
            for t in terms:
                out += eval_term(t, pts)
        return out[0] if single else out

    def copy(self):
        g = GradedFunction(self.dim_in, self.dim_out)
        for d, ts in self.terms.items():
            g.terms[d] = list(ts)
        return g

    def drop_degree(self, degree):
        """Copy without the terms of one degree (ablation helper)."""
        g = self.copy()
        g.terms.pop(degree, None)
        return g

    def max_degree(self):
        return max(self.terms) if self.terms else None


# ---------------------------------------------------------------------------
# extraction of homogeneous components
# ---------------------------------------------------------------------------

def _ladder(rho, n_lam, ratio=0.7, top_fraction=0.5):
    return rho * top_fraction * ratio ** np.arange(n_lam)


def extract_homogeneous(f, degrees, grid, *, rho=None, ratio=0.7, n_lam=None,
                        fit_tol=1e-4, max_cond=1e9, zero_tol=None,
                        degree_cap=None, validate=True):
    """Split f into homogeneous components at the given integer degrees.

    Parameters
    ----------
    f : callable
        Batch evaluator pts (..., n) -> (..., out_dim).
    degrees : sequence of int
        Degrees modeled by the fit, in increasing order.  Components of f at
        higher degrees are treated as the o(max) rest; components *below*
        min(degrees) must be absent (they trip FitResidualTooLarge).
    grid : CrossSectionGrid
        Section nodes at which the components are tabulated.

    Returns
    -------
    dict degree -> HomogeneousTerm (interpolant, or zero when the component
    vanishes at the residual floor), each with fit diagnostics in .meta.
    """
    degrees = sorted(int(d) for d in degrees)
    if len(set(degrees)) != len(degrees):
        raise ValidationError("duplicate degrees in extraction request")
    if degree_cap is not None and degrees[-1] > degree_cap:
        raise DegreeOverflow(
            f"requested degree {degrees[-1]} exceeds tracking cap {degree_cap}")
    rho = grid.domain.rho if rho is None else rho
    if n_lam is None:
        n_lam = max(8, len(degrees) + 2)
    lams = _ladder(rho, n_lam, ratio)
    d0 = degrees[0]

    pts = grid.directions[:, None, :] * lams[None, :, None]     # (nodes, n_lam, n)
    member = grid.domain.member(pts.reshape(-1, pts.shape[-1]))
    if not member.all():
        raise OutOfDomain("extraction ladder left the domain (check rho / chart margin)")
    vals = np.asarray(f(pts), dtype=float)                       # (nodes, n_lam, out)
    out_dim = vals.shape[-1]

    # weighted Vandermonde: rows scaled by lam^-d0
    V = np.stack([lams ** (d - d0) for d in degrees], axis=1)    # (n_lam, ndeg)
    col_scale = np.linalg.norm(V, axis=0)
    Vn = V / col_scale
    cond = np.linalg.cond(Vn)
    if cond > max_cond:
        raise IllConditionedExtraction(
            f"scaled Vandermonde condition {cond:.2e} > {max_cond:.1e} "
            f"(degrees {degrees}, radii {lams[0]:.3g}..{lams[-1]:.3g})")

    y = vals / (lams[None, :, None] ** d0)                       # (nodes, n_lam, out)
    rhs = np.moveaxis(y, 1, 0).reshape(n_lam, -1)                # (n_lam, nodes*out)
    sol, *_ = np.linalg.lstsq(Vn, rhs, rcond=None)
    coeffs = (sol / col_scale[:, None]).reshape(len(degrees), grid.n_nodes, out_dim)

    resid = Vn @ sol - rhs
    y_scale = np.abs(rhs).max(axis=0)
    rel_resid = np.abs(resid).max(axis=0) / np.maximum(y_scale, RESIDUAL_FLOOR)
    # residual only meaningful where the signal is above the floor
    active = y_scale > 10 * RESIDUAL_FLOOR
    worst = float(rel_resid[active].max()) if active.any() else 0.0
    if worst > fit_tol:
        raise FitResidualTooLarge(
            f"relative fit residual {worst:.2e} > {fit_tol:.1e}: declared degrees "
            f"{degrees} are inconsistent with the sampled function")

    overall = max(float(np.abs(coeffs).max()), RESIDUAL_FLOOR)
    if zero_tol is None:
        zero_tol = RESIDUAL_FLOOR * max(1.0, overall)

    terms = {}
    for idx, d in enumerate(degrees):
        c = coeffs[idx]
        if np.abs(c).max() <= zero_tol:
            terms[d] = HomogeneousTerm.zero(d, grid.domain.n, out_dim)
            terms[d].meta.update(cond=cond, fit_residual=worst)
            continue
        interp = _Interp(grid, c)
        err = worst * np.abs(c).max()
        term = HomogeneousTerm(d, grid.domain.n, out_dim, "interpolant", interp,
                               error_bound=err,
                               meta={"cond": cond, "fit_residual": worst,
                                     "ladder": lams.copy()})
        terms[d] = term

    if validate and grid.n_nodes > 2:
        _attach_interp_error(terms, f, degrees, grid, lams, d0, col_scale, Vn)
    return terms


def _attach_interp_error(terms, f, degrees, grid, lams, d0, col_scale, Vn):
    """Estimate spline error by re-fitting at mid-node directions."""
    mids = grid.midpoint_params(count=16)
    dirs = grid.chart.direction(mids)
    pts = dirs[:, None, :] * lams[None, :, None]
    vals = np.asarray(f(pts), dtype=float)
    y = vals / (lams[None, :, None] ** d0)
    rhs = np.moveaxis(y, 1, 0).reshape(len(lams), -1)
    sol, *_ = np.linalg.lstsq(Vn, rhs, rcond=None)
    ref = (sol / col_scale[:, None]).reshape(len(degrees), len(mids), vals.shape[-1])
    for idx, d in enumerate(degrees):
        term = terms[d]
        if term.is_zero():
            continue
        approx = term.payload(mids)
        gap = float(np.abs(approx - ref[idx]).max())
        term.error_bound = max(term.error_bound, 2.0 * gap)
        term.meta["interp_error"] = gap


def materialize(term, grid, validate=True):
    """Tabulate a term on the section grid and return an interpolant term.

    The direct backend stays reachable in meta['direct'] for cross-checks.
    """
    if term.kind in ("zero", "interpolant"):
        return term
    values = eval_term(term, grid.directions)
    interp = _Interp(grid, values)
    out = HomogeneousTerm(term.degree, term.dim_in, term.dim_out, "interpolant",
                          interp, error_bound=term.error_bound,
                          meta=dict(term.meta, direct=term))
    if validate and grid.n_nodes > 2:
        mids = grid.midpoint_params(count=16)
        dirs = grid.chart.direction(mids)
        gap = float(np.abs(interp(mids) - eval_term(term, dirs)).max())
        out.error_bound = max(out.error_bound, 2.0 * gap)
        out.meta["interp_error"] = gap
    return out


def homogeneous_exponents(arity, degree):
    """All exponent tuples of total degree `degree` in `arity` variables."""
    if arity == 1:
        return [(degree,)]
    out = []
    for k in range(degree + 1):
        out.extend((k,) + rest for rest in homogeneous_exponents(arity - 1, degree - k))
    return out


def polynomial_reconstruction(term, grid=None, rtol=1e-9):
    """Try to express a homogeneous term as an exact polynomial.

    Fits the full monomial basis of the term's degree to its section-node
    values and accepts only when the overdetermined fit closes at rtol
    (relative to the value scale).  On success returns a polynomial-backed
    term of the same degree; a term whose values carry genuinely
    non-polynomial content is rejected (returns None).

    A polynomial backend evaluates anywhere, which matters when the data
    must be read off outside the section chart that produced it (e.g. along
    trajectories that leave the sector).
    """
    if term.kind in ("zero", "polynomial"):
        return term
    if grid is None:
        if term.kind == "interpolant":
            grid = term.payload.grid
        else:
            raise ValidationError("polynomial_reconstruction needs a grid "
                                  "for non-interpolant terms")
    dirs = grid.directions
    vals = eval_term(term, dirs)
    if vals.ndim == 1:
        vals = vals[:, None]
    exps = homogeneous_exponents(term.dim_in, term.degree)
    if len(dirs) < len(exps):
        return None
    V = np.stack([np.prod(dirs ** np.asarray(e, dtype=float), axis=1) for e in exps],
                 axis=1)
    coeffs, *_ = np.linalg.lstsq(V, vals, rcond=None)
    scale = max(float(np.abs(vals).max()), RESIDUAL_FLOOR)
    misfit = float(np.abs(V @ coeffs - vals).max())
    if misfit > rtol * scale:
        return None
    drop = RESIDUAL_FLOOR * max(1.0, float(np.abs(coeffs).max()))
    comps = []
    for j in range(vals.shape[1]):
        comps.append({e: float(c) for e, c in zip(exps, coeffs[:, j])
                      if abs(c) > drop})
    poly = SparsePolynomial(term.dim_in, comps)
    out = HomogeneousTerm(term.degree, term.dim_in, term.dim_out, "polynomial",
                          poly, error_bound=term.error_bound,
                          meta=dict(term.meta, reconstructed=True,
                                    reconstruction_misfit=misfit))
    return out
