"""T-periodic vector fields: the averaging variant of the induction.

For dz/dt = X(z, t) = (p + f, q + g) + periodic forcing, with p, q
homogeneous of degrees N, M and no linear part, we look for a T-periodic
K(x, t) and an autonomous reduced field Y(x) such that the infinitesimal
invariance error

    E(x, t) = X(K(x,t), t) - D_x K(x,t) Y(x) - dK/dt(x,t)

vanishes to order ell.  Each order j splits the leading parts of E into
their time average and the zero-mean remainder:

  * the averaged equations are literally the map-case cohomological
    equations (same solvers, same margin logic), giving the
    t-independent part of K^j and -- when the margin is not positive --
    a stored term of Y at degree j+N-1 in place of the map's R-term;
  * the zero-mean parts integrate in time, dZ/dt = osc(E), with the
    constant fixed by zero average.  On the Fourier truncation this is
    exact: a cos/sin pair at harmonic k integrates to the swapped pair
    scaled by T/(2 pi k).

K^j is therefore a degree-j mean plus oscillatory terms of degrees
j+N-1 / j+L-1 (x / y block); Y accumulates p(.,0) at degree N plus any
stored remainders and never depends on t.

Time is handled on a uniform phase grid (cfg.phases points per period).
The rectangle rule on that grid integrates trigonometric polynomials
below the Nyquist harmonic exactly, so means, projections and the
spectral time derivative are all exact on the truncation; the x-side
accuracy is governed by the same extraction and quadrature machinery as
the map case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohomology import CohomologicalProblem, solve_general
from .constants import check_hypotheses, regularity_budget, solvability_margin
from .errors import (
    BudgetUndefined, DivergentCohomologicalIntegral, ValidationError,
)
from .graded import (
    CrossSectionGrid, GradedFunction, HomogeneousTerm, _Interp,
    differentiate_term, eval_term, extract_homogeneous,
    polynomial_reconstruction,
)
from . import parametrize as _pz

__all__ = [
    "PeriodicTerm", "PeriodicFunction", "FlowState", "FlowParametrization",
    "split_mean_oscillatory", "flow_error", "initialize_flow",
    "induction_step_flow", "tail_sweep_flow", "run_flow",
]


# ---------------------------------------------------------------------------
# periodic terms
# ---------------------------------------------------------------------------


@dataclass
class PeriodicTerm:
    """One homogeneous-in-x piece of K(x, t).

    h(lam x, t) = lam^degree h(x, t); the time dependence is a truncated
    Fourier series: an optional mean term plus (k, cos-term, sin-term)
    harmonics with k >= 1, so the oscillatory part has zero average by
    construction.
    """

    degree: int
    period: float
    mean: object = None              # HomogeneousTerm or None
    harmonics: list = field(default_factory=list)

    def _probe(self):
        if self.mean is not None:
            return self.mean
        for _, ct, st in self.harmonics:
            if ct is not None:
                return ct
            if st is not None:
                return st
        raise ValidationError("periodic term with no content")

    @property
    def dim_in(self):
        return self._probe().dim_in

    @property
    def dim_out(self):
        return self._probe().dim_out

    def coefficient_terms(self):
        out = [] if self.mean is None else [self.mean]
        for _, ct, st in self.harmonics:
            out.extend(t for t in (ct, st) if t is not None)
        return out

    def evaluate(self, pts, t):
        """Value at (pts, t); t scalar."""
        pts = np.asarray(pts, dtype=float)
        w = 2.0 * np.pi / self.period
        out = 0.0
        if self.mean is not None:
            out = out + eval_term(self.mean, pts)
        for k, ct, st in self.harmonics:
            if ct is not None:
                out = out + np.cos(k * w * t) * eval_term(ct, pts)
            if st is not None:
                out = out + np.sin(k * w * t) * eval_term(st, pts)
        return out

    def time_derivative(self, pts, t):
        """dK/dt at (pts, t), spectrally (exact on the truncation)."""
        pts = np.asarray(pts, dtype=float)
        w = 2.0 * np.pi / self.period
        out = np.zeros(pts.shape[:-1] + (self.dim_out,))
        for k, ct, st in self.harmonics:
            if ct is not None:
                out -= k * w * np.sin(k * w * t) * eval_term(ct, pts)
            if st is not None:
                out += k * w * np.cos(k * w * t) * eval_term(st, pts)
        return out

    def jacobian(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        w = 2.0 * np.pi / self.period
        out = np.zeros(pts.shape[:-1] + (self.dim_out, self.dim_in))
        if self.mean is not None:
            out += differentiate_term(self.mean, pts)
        for k, ct, st in self.harmonics:
            if ct is not None:
                out += np.cos(k * w * t) * differentiate_term(ct, pts)
            if st is not None:
                out += np.sin(k * w * t) * differentiate_term(st, pts)
        return out


class PeriodicFunction:
    """A finite sum of PeriodicTerms (the flow-case graded K)."""

    def __init__(self, dim_in, dim_out, period):
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self.period = float(period)
        self.terms = []

    def add_term(self, term):
        if term.dim_in != self.dim_in or term.dim_out != self.dim_out:
            raise ValidationError("periodic term dimensions do not match")
        self.terms.append(term)

    def term_list(self):
        return list(self.terms)

    def degrees(self):
        return sorted({t.degree for t in self.terms})

    def copy(self):
        out = PeriodicFunction(self.dim_in, self.dim_out, self.period)
        out.terms = list(self.terms)
        return out

    def evaluate(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (self.dim_out,))
        for term in self.terms:
            out += term.evaluate(pts, t)
        return out

    def time_derivative(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (self.dim_out,))
        for term in self.terms:
            out += term.time_derivative(pts, t)
        return out

    def jacobian(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (self.dim_out, self.dim_in))
        for term in self.terms:
            out += term.jacobian(pts, t)
        return out


def split_mean_oscillatory(E, period, nphases=64):
    """Split a T-periodic evaluator E(x, t) into mean and zero-mean parts.

    The mean is the composite quadrature average over one period on a
    uniform grid (trapezoid with periodic identification = rectangle
    rule), exact for trigonometric polynomials below nphases/2.  Returns
    (mean, oscillatory); oscillatory.residual_mean re-measures the
    quadrature average of the remainder.
    """
    tgrid = np.arange(nphases) * (period / nphases)

    def mean(x):
        return sum(np.asarray(E(x, t), dtype=float) for t in tgrid) / nphases

    def oscillatory(x, t):
        return np.asarray(E(x, t), dtype=float) - mean(x)

    def residual_mean(x):
        acc = sum(np.asarray(oscillatory(x, t), dtype=float) for t in tgrid)
        return float(np.abs(acc).max()) / nphases

    oscillatory.residual_mean = residual_mean
    return mean, oscillatory


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def _embed_flow(term, out_dim, offset):
    """Row-embed a block term, keeping an exact-as-possible jacobian."""
    out = _pz._embed_rows(term, out_dim, offset)
    if out.kind not in ("zero", "polynomial") and out.jac is None:
        sub = term

        def jac(pts):
            pts = np.asarray(pts, dtype=float)
            inner = differentiate_term(sub, pts)
            full = np.zeros(pts.shape[:-1] + (out_dim, sub.dim_in))
            full[..., offset:offset + sub.dim_out, :] = inner
            return full

        out.jac = jac
    return out


@dataclass
class FlowState:
    """The flow induction at order j: K^{<=j}(x,t) and Y^{<=j+N-1}(x)."""

    j: int
    K: PeriodicFunction
    Y: GradedFunction
    strategy: str
    ledger: list
    fieldspec: object
    mapspec: object          # the autonomous polynomial part
    domain: object
    report: object
    opts: object
    grid: object
    free_kx: dict = field(default_factory=dict)

    def error(self, pts, t):
        """E(x,t) = X(K,t) - D_xK Y - dK/dt; t scalar or 1-D array."""
        return flow_error(self.fieldspec, self.K, self.Y, pts, t)


def _clone_flow(state, j):
    return FlowState(
        j=j, K=state.K.copy(), Y=state.Y.copy(), strategy=state.strategy,
        ledger=list(state.ledger), fieldspec=state.fieldspec,
        mapspec=state.mapspec, domain=state.domain, report=state.report,
        opts=state.opts, grid=state.grid, free_kx=state.free_kx)


@dataclass
class FlowParametrization:
    """Final product: T-periodic K, autonomous Y, budgets and ledger."""

    K: PeriodicFunction
    Y: GradedFunction
    ell: int
    gamma: object
    ell_f: object
    residual: object
    ledger: list
    constants: object = None
    strategy: str = "normal-form"
    name: str = "problem"
    period: float = 1.0


# ---------------------------------------------------------------------------
# pointwise error on the phase grid
# ---------------------------------------------------------------------------


def flow_error(X, K, Y, pts, t):
    """E(x,t) = X(K,t) - D_xK Y - dK/dt for any (K, Y); t scalar or 1-D."""
    from types import SimpleNamespace

    view = SimpleNamespace(fieldspec=X, mapspec=X.base, K=K, Y=Y)
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, pts.shape[-1])
    tarr = np.atleast_1d(np.asarray(t, dtype=float))
    out = _phase_error(view, flat, tarr)
    out = out.reshape(tarr.shape + pts.shape[:-1] + (out.shape[-1],))
    return out[0] if np.ndim(t) == 0 else out


def _gather_coefficients(state, pts, want_jac=True):
    """Mean / cos_k / sin_k values (and jacobians) of K at pts."""
    n = state.mapspec.n
    dim = state.K.dim_out
    P = len(pts)
    mv = np.zeros((P, dim))
    jm = np.zeros((P, dim, n)) if want_jac else None
    cv, sv, jc, js = {}, {}, {}, {}
    for pterm in state.K.terms:
        if pterm.mean is not None:
            mv += eval_term(pterm.mean, pts)
            if want_jac:
                jm += differentiate_term(pterm.mean, pts)
        for k, ct, st_ in pterm.harmonics:
            for tt, store, jstore in ((ct, cv, jc), (st_, sv, js)):
                if tt is None:
                    continue
                store.setdefault(k, np.zeros((P, dim)))
                store[k] += eval_term(tt, pts)
                if want_jac:
                    jstore.setdefault(k, np.zeros((P, dim, n)))
                    jstore[k] += differentiate_term(tt, pts)
    return mv, cv, sv, jm, jc, js


def _phase_error(state, pts, tgrid):
    """E at pts (P, n) for every phase in tgrid: (PH, P, n+m)."""
    X = state.fieldspec
    w = 2.0 * np.pi / X.period
    mv, cv, sv, jm, jc, js = _gather_coefficients(state, pts)
    PH = len(tgrid)

    z = np.broadcast_to(mv, (PH,) + mv.shape).copy()
    DK = np.broadcast_to(jm, (PH,) + jm.shape).copy()
    dtK = np.zeros_like(z)
    for k in set(cv) | set(sv):
        ck = np.cos(k * w * tgrid)[:, None, None]
        sk = np.sin(k * w * tgrid)[:, None, None]
        if k in cv:
            z += ck * cv[k]
            DK += ck[..., None] * jc[k]
            dtK += -k * w * sk * cv[k]
        if k in sv:
            z += sk * sv[k]
            DK += sk[..., None] * js[k]
            dtK += k * w * ck * sv[k]

    XK = X.X(z, tgrid[:, None])
    Ypts = state.Y.evaluate(pts)
    DKY = np.einsum("tpij,pj->tpi", DK, Ypts)
    return XK - DKY - dtK


# ---------------------------------------------------------------------------
# extraction: degree window x harmonic projections
# ---------------------------------------------------------------------------


def _flow_window(state, block, d0, cfg):
    """Degrees the grade bookkeeping allows in [d0, d0 + window)."""
    F = state.mapspec
    hi = d0 + cfg.extract_window - 1
    k_deg = {t.degree for t in state.K.terms} | {1}
    y_deg = set(state.Y.degrees())
    pieces = [F.N] if block == "x" else [F.M]
    higher = F.higher_x if block == "x" else F.higher_y
    pieces.extend(d for d, _ in higher)
    pieces.extend(fp.degree for fp in state.fieldspec.forcing
                  if fp.block == block)
    present = set(k_deg)                       # the d/dt part
    for dF in pieces:
        present |= _pz._products(k_deg, dF, hi)
    for kd in k_deg:                           # the D_xK . Y part
        present |= {kd - 1 + yd for yd in y_deg if kd - 1 + yd <= hi}
    if F.remainder is not None:
        present |= set(range(F.r + 1, hi + 1))
    return [d for d in sorted(present) if d0 <= d <= hi]


def _error_cache(state, cfg):
    tgrid = np.arange(cfg.phases) * (state.fieldspec.period / cfg.phases)
    cache = {}

    def full(pts):
        pts = np.asarray(pts, dtype=float)
        key = pts.tobytes()
        if key not in cache:
            flat = pts.reshape(-1, pts.shape[-1])
            E = _phase_error(state, flat, tgrid)
            cache[key] = E.reshape((len(tgrid),) + pts.shape[:-1]
                                   + (E.shape[-1],))
        return cache[key]

    return full, tgrid


def _project(E, tgrid, period, k, kind):
    """Rectangle-rule Fourier projection of E (PH, ..., d) onto harmonic k."""
    PH = len(tgrid)
    if k == 0:
        return E.mean(axis=0)
    w = 2.0 * np.pi / period
    tr = np.cos(k * w * tgrid) if kind == "cos" else np.sin(k * w * tgrid)
    return (2.0 / PH) * np.tensordot(tr, E, axes=(0, 0))


def _extract_flow(state, errf, tgrid, block, d0, cfg):
    """Leading part of one block of E at degree d0, per harmonic.

    Returns (mean term, [(k, cos term or None, sin term or None)]).
    Harmonics are probed up to min(cfg.harmonics, Nyquist); projections
    whose sup at rho/2 sits below the evaluation floor are exact zeros.
    """
    F = state.mapspec
    n = F.n
    out_dim = n if block == "x" else F.m
    sl = slice(0, n) if block == "x" else slice(n, n + F.m)
    period = state.fieldspec.period
    window = _flow_window(state, block, d0, cfg)

    zero = HomogeneousTerm.zero(d0, n, out_dim)
    zero.meta["window"] = window
    if d0 not in window:
        return zero, []

    lam = 0.5 * state.domain.rho
    probe = errf(state.grid.directions * lam)
    err_sum = sum(t.error_bound * lam ** t.degree
                  for pt in state.K.terms for t in pt.coefficient_terms())
    err_sum += sum(t.error_bound * lam ** t.degree
                   for t in state.Y.term_list())
    floor = 10.0 * err_sum + 1e-13 * lam
    cap = cfg.degree_cap_factor * max(cfg.ell, F.N, F.M)
    kmax = min(cfg.harmonics, cfg.phases // 2 - 1)

    def one(k, kind):
        sup = float(np.abs(
            _project(probe, tgrid, period, k, kind)[..., sl]).max())
        if sup <= floor:
            return None if k else zero

        def f(pts):
            return _project(errf(pts), tgrid, period, k, kind)[..., sl]

        term = extract_homogeneous(f, window, state.grid, degree_cap=cap)[d0]
        rec = polynomial_reconstruction(term)
        if rec is not None and rec is not term:
            rec.error_bound = max(rec.error_bound, term.error_bound)
            term = rec
        # The probe gate above sees the whole window; the degree-d0
        # coefficient itself can still come out at the floor (the harmonic
        # lives entirely at higher degrees).  Re-test the coefficient.
        tsup = float(np.abs(eval_term(term, state.grid.directions)).max())
        if tsup * lam ** d0 <= floor:
            return None if k else zero
        term.meta.update(window=window, harmonic=(k, kind) if k else "mean")
        return term

    mean = one(0, "cos")
    harmonics = []
    for k in range(1, kmax + 1):
        ct, st_ = one(k, "cos"), one(k, "sin")
        if ct is not None or st_ is not None:
            harmonics.append((k, ct, st_))
    return mean, harmonics


def _integrate_oscillatory(harmonics, period, grid, dim_in):
    """Solve dZ/dt = osc part: swap cos/sin pairs and scale by 1/(k w).

    Works on section-node values, so the result is an interpolant term
    (polynomially reconstructed when the data allows), with error bounds
    scaled along.
    """
    w = 2.0 * np.pi / period
    out = []
    for k, ct, st_ in harmonics:
        scale = 1.0 / (k * w)
        probe = ct if ct is not None else st_
        degree, dim_out = probe.degree, probe.dim_out

        def build(vals, err):
            if vals is None:
                return None
            interp = _Interp(grid, vals)
            t = HomogeneousTerm(degree, dim_in, dim_out, "interpolant",
                                interp, error_bound=err * scale)
            rec = polynomial_reconstruction(t, grid)
            if rec is not None:
                rec.error_bound = max(rec.error_bound, t.error_bound)
                return rec
            return t

        cvals = eval_term(ct, grid.directions) if ct is not None else None
        svals = eval_term(st_, grid.directions) if st_ is not None else None
        # K harmonic: d/dt (cK cos + sK sin) = k w (sK cos - cK sin)
        new_c = build(-scale * svals if svals is not None else None,
                      st_.error_bound if st_ is not None else 0.0)
        new_s = build(scale * cvals if cvals is not None else None,
                      ct.error_bound if ct is not None else 0.0)
        out.append((k, new_c, new_s))
    return out


def _osc_periodic_term(harmonics, degree, period, out_dim, offset, dim):
    embedded = [(k,
                 _embed_flow(ct, dim, offset) if ct is not None else None,
                 _embed_flow(st_, dim, offset) if st_ is not None else None)
                for k, ct, st_ in harmonics]
    return PeriodicTerm(degree=degree, period=period, mean=None,
                        harmonics=embedded)


def _osc_error_bound(harmonics):
    return float(sum((t.error_bound for _, c, s in harmonics
                      for t in (c, s) if t is not None), 0.0))


def _attach_result_jac(term, res):
    # Route jacobians of quadrature solutions through the variational
    # integral rather than finite differences on the section spline.  Must
    # not go through res.jacobian_at: that consults term.jac and would loop.
    if (term.kind not in ("zero", "polynomial") and term.jac is None
            and res is not None and getattr(res, "problem", None) is not None):
        from .cohomology import _direct_eval

        def jac(pts, _res=res):
            pts = np.asarray(pts, dtype=float)
            prob = _res.problem
            out = _direct_eval(_res, pts.reshape(-1, prob.n), want_jac=True)
            return out.reshape(pts.shape[:-1] + (prob.k, prob.n))

        term.jac = jac
    return term


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def initialize_flow(X, D, report=None, opts=None, free_kx=None):
    """Seed state: K = (x, 0) (t-independent), Y = p(.,0) at degree N."""
    from .model import RunOptions

    F = X.base
    opts = opts if opts is not None else RunOptions()
    opts.validate()
    if report is None:
        report = check_hypotheses(F, D)
    report.raise_if_failed(force=opts.force)

    n, m = F.n, F.m
    K = PeriodicFunction(n, n + m, X.period)
    K.add_term(PeriodicTerm(degree=1, period=X.period,
                            mean=_pz._graft_identity(n, m)))
    Y = GradedFunction(n, n)
    Y.add_term(_pz._poly_term(F.pa(), F.N))

    fkx = {}
    if free_kx:
        for deg, poly in free_kx.items():
            if poly.arity != n or poly.out_dim != n:
                raise ValidationError(
                    f"free K_x term at degree {deg} must map R^{n} to R^{n}")
            if not poly.is_homogeneous(deg):
                raise ValidationError(
                    f"free K_x term at degree {deg} is not homogeneous "
                    "of that degree")
            fkx[int(deg)] = poly

    ledger = [
        _pz._entry(1, "K", 1, "seed", 0.0, note="K^1 = (x, 0)"),
        _pz._entry(1, "Y", F.N, "seed", 0.0, note="Y^N = p(x, 0)"),
    ]
    grid = CrossSectionGrid(D, opts.nodes)
    return FlowState(j=1, K=K, Y=Y, strategy=opts.strategy, ledger=ledger,
                     fieldspec=X, mapspec=F, domain=D, report=report,
                     opts=opts, grid=grid, free_kx=fkx)


def induction_step_flow(state, X=None, cfg=None):
    """One order of the flow induction: consume the state at j, return j+1."""
    X = X if X is not None else state.fieldspec
    cfg = cfg if cfg is not None else state.opts
    F = X.base
    j = state.j + 1
    if j + F.N > cfg.ell + 1:
        raise ValidationError(
            f"step to order {j} needs degree {j + F.N - 1} > ell = {cfg.ell}")

    n, m, N, L = F.n, F.m, F.N, F.L
    cc = state.report.constants
    new = _clone_flow(state, j)
    errf, tgrid = _error_cache(state, cfg)

    ex_mean, ex_osc = _extract_flow(state, errf, tgrid, "x", j + N - 1, cfg)
    ey_mean, ey_osc = _extract_flow(state, errf, tgrid, "y", j + L - 1, cfg)

    # mean equations: identical to the map case (same solvers)
    ky, row = _pz._solve_ky(state, ey_mean, j, cfg)
    if "result" in row:
        _attach_result_jac(ky, row["result"])
    new.ledger.append(row)
    new.K.add_term(PeriodicTerm(degree=j, period=X.period,
                                mean=_embed_flow(ky, n + m, n)))

    dyp = F.Dyp0()
    parts = [ex_mean]
    if not dyp.is_zero() and not ky.is_zero():
        scale = float(np.abs(dyp.evaluate(state.grid.directions)).max())
        parts.append(_pz._matvec_term(dyp, scale, ky, j + N - 1))
    wx = _pz._sum_terms(j + N - 1, n, n, parts)

    try:
        mg = solvability_margin(j - 1, cc.a_p, cc.b_p, cc.A_p, -cc.B_p)
        margin = float(mg.margin)
    except BudgetUndefined:
        margin = None
    tie = bool(margin is not None
               and abs(margin) <= _pz._MARGIN_TIE * max(1.0, j))
    solvable = margin is not None and margin > 0 and not tie

    normal_form = state.strategy == "normal-form" and solvable
    if normal_form or cfg.force_zero_r:
        if wx.is_zero():
            kx = HomogeneousTerm.zero(j, n, n)
            new.ledger.append(_pz._entry(j, "K_x", j, "zero", 0.0,
                                         margin=margin,
                                         note="no x-forcing at this degree"))
        else:
            prob = CohomologicalProblem(pa=F.pa(), Q=F.Dxp0(), w=wx,
                                        nu=j - 1, domain=state.domain)
            try:
                res = solve_general(prob, opts=cfg, grid=state.grid)
            except DivergentCohomologicalIntegral as exc:
                raise _pz._annotate(exc, "x", j) from exc
            kx = _attach_result_jac(res.term, res)
            new.ledger.append(_pz._entry(
                j, "K_x", j, "general", kx.error_bound, margin=margin,
                kappa_hat=res.diagnostics.get("kappa_hat"),
                pde_residual=res.diagnostics.get("pde_residual"),
                result=res))
        new.K.add_term(PeriodicTerm(degree=j, period=X.period,
                                    mean=_embed_flow(kx, n + m, 0)))
        note = ("forced Y tail = 0" if cfg.force_zero_r and not normal_form
                else "solvability margin positive")
        new.ledger.append(_pz._entry(j, "Y", j + N - 1, "normal-form", 0.0,
                                     margin=margin, note=note))
    else:
        kx_poly = state.free_kx.get(j)
        if kx_poly is not None and not kx_poly.is_zero():
            kx = _pz._poly_term(kx_poly, j)
            yterm = _pz._sum_terms(j + N - 1, n, n, [
                wx, _pz._neg_term(_pz._commutator_term(
                    kx_poly, F.pa(), F.Dxp0(), j + N - 1))])
            kx_note = "supplied polynomial"
        else:
            kx = HomogeneousTerm.zero(j, n, n)
            yterm = wx
            kx_note = "default 0"
        new.K.add_term(PeriodicTerm(degree=j, period=X.period,
                                    mean=_embed_flow(kx, n + m, 0)))
        new.Y.add_term(yterm)
        new.ledger.append(_pz._entry(j, "K_x", j, "free", kx.error_bound,
                                     margin=margin, note=kx_note))
        note = "margin within noise of 0: conservative branch" if tie else \
            ("free strategy" if state.strategy == "free-kx"
             else "solvability margin not positive")
        new.ledger.append(_pz._entry(j, "Y", j + N - 1,
                                     "zero" if yterm.is_zero() else "stored",
                                     yterm.error_bound, margin=margin,
                                     margin_tie=tie, note=note))

    # oscillatory parts: dZ/dt = osc(E), zero average
    for block, osc, deg, offset, odim in (
            ("x", ex_osc, j + N - 1, 0, n), ("y", ey_osc, j + L - 1, n, m)):
        if not osc:
            new.ledger.append(_pz._entry(
                j, f"K_{block}-osc", deg, "zero", 0.0,
                note="no oscillatory forcing"))
            continue
        kh = _integrate_oscillatory(osc, X.period, state.grid, n)
        new.K.add_term(_osc_periodic_term(kh, deg, X.period, odim, offset,
                                          n + m))
        new.ledger.append(_pz._entry(
            j, f"K_{block}-osc", deg, "quadrature", _osc_error_bound(kh),
            harmonics=[k for k, _, _ in kh],
            note="time integral with zero average"))
    return new


def tail_sweep_flow(state, X=None, ell=None, cfg=None):
    """Finish the y-block when M < N, as in the map case."""
    X = X if X is not None else state.fieldspec
    cfg = cfg if cfg is not None else state.opts
    ell = ell if ell is not None else cfg.ell
    F = X.base
    N, M, L = F.N, F.M, F.L
    if not M < N:
        return state
    if state.j != ell - N + 1:
        raise ValidationError(
            f"tail sweep expects the induction complete at j = {ell - N + 1}, "
            f"got j = {state.j}")
    n, m = F.n, F.m
    cur = state
    for j in range(ell - N + 2, ell - L + 2):
        errf, tgrid = _error_cache(cur, cfg)
        ey_mean, ey_osc = _extract_flow(cur, errf, tgrid, "y", j + L - 1, cfg)
        new = _clone_flow(cur, j)
        ky, row = _pz._solve_ky(cur, ey_mean, j, cfg)
        if "result" in row:
            _attach_result_jac(ky, row["result"])
        new.ledger.append(row)
        new.K.add_term(PeriodicTerm(degree=j, period=X.period,
                                    mean=_embed_flow(ky, n + m, n)))
        if ey_osc:
            kh = _integrate_oscillatory(ey_osc, X.period, cur.grid, n)
            new.K.add_term(_osc_periodic_term(kh, j + L - 1, X.period, m, n,
                                              n + m))
            new.ledger.append(_pz._entry(
                j, "K_y-osc", j + L - 1, "quadrature", _osc_error_bound(kh),
                harmonics=[k for k, _, _ in kh],
                note="time integral with zero average"))
        new.ledger.append(_pz._entry(
            j, "K_x", j, "zero", 0.0, note="tail sweep: x-block past order ell"))
        cur = new
    return cur


def run_flow(problem, free_kx=None, measure_residual=True):
    """Full pipeline for a field document: hypotheses, induction, budgets."""
    if problem.kind != "field":
        raise ValidationError(
            "run_flow expects a field document; map documents go through "
            "the map pipeline")
    cfg = problem.run
    cfg.validate()
    X, D = problem.spec, problem.domain
    F = X.base

    report = check_hypotheses(F, D)
    state = initialize_flow(X, D, report, opts=cfg, free_kx=free_kx)
    for _ in range(2, cfg.ell - F.N + 2):
        state = induction_step_flow(state, X, cfg)
    if F.M < F.N:
        state = tail_sweep_flow(state, X, cfg.ell, cfg)

    try:
        budget = regularity_budget(report.constants, cfg.ell)
        gamma, ell_f = budget.gamma, budget.ell_f
    except BudgetUndefined as exc:
        if not cfg.force:
            raise
        gamma, ell_f = None, None
        state.ledger.append(_pz._entry(state.j, "budget", cfg.ell,
                                       "undefined", 0.0, note=str(exc)))

    residual = None
    if measure_residual:
        from .verify import residual_order_flow
        residual = residual_order_flow(X, D, state.K, state.Y, cfg)

    return FlowParametrization(
        K=state.K, Y=state.Y, ell=cfg.ell, gamma=gamma, ell_f=ell_f,
        residual=residual, ledger=state.ledger, constants=report.constants,
        strategy=cfg.strategy, name=problem.name, period=X.period)
