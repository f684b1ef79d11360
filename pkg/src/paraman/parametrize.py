"""Order-by-order construction of the invariant-manifold pair (K, R).

The map is F(x, y) = (x + p + f, y + q + g) with p, q homogeneous of
degrees N, M and q(x, 0) = 0, so {y = 0} is invariant to leading order.
We build a graded K(x) = (x, 0) + sum K^j and a reduced map
R(x) = x + p(x, 0) + sum R^l such that the conjugacy error

    E = F o K - K o R

vanishes to the target order ell.  Each step j reads off the leading
homogeneous parts of E (degree j+N-1 in the x-block, j+L-1 in the y-block,
L = min(N, M)), solves a cohomological equation per block and appends the
new terms:

  * K_y^j: a transport equation along p(.,0) when M >= N (with the linear
    term D_y q(x,0) present exactly when M == N), or the pointwise
    algebraic system D_y q(x,0) K_y = -E_y when M < N.
  * K_x^j: when the solvability margin at this degree is positive the
    normal-form strategy sets R^{j+N-1} = 0 and solves a transport
    equation with Q = D_x p(x,0); otherwise the forcing is stored in
    R^{j+N-1} and K_x^j is free (default 0, user-suppliable).

When M < N the x-block runs out of degrees first and a tail sweep appends
the remaining K_y^j, all from the algebraic system, until the y-block also
reaches order ell.

E is evaluated by honest pointwise composition -- K may contain
section-interpolant terms, so no symbolic expansion exists.  Composition
points must satisfy R(x) in V whenever chart-bound terms are present;
violations raise LeftDomain rather than silently extrapolating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BudgetUndefined, DivergentCohomologicalIntegral, LeftDomain, NearBoundary,
    OutOfDomain, ValidationError,
)
from .graded import (
    CrossSectionGrid, GradedFunction, HomogeneousTerm, eval_term,
    extract_homogeneous, polynomial_reconstruction,
)
from .model import RunOptions, SparsePolynomial
from .constants import check_hypotheses, regularity_budget, solvability_margin
from .cohomology import CohomologicalProblem, solve_algebraic, solve_general

__all__ = [
    "InductionState", "Parametrization", "initialize", "induction_step",
    "tail_sweep", "run",
]

# |margin| below this reads as a tie against the sampling noise of the
# constants; the conservative branch keeps the R-term
_MARGIN_TIE = 1e-6


# ---------------------------------------------------------------------------
# term plumbing
# ---------------------------------------------------------------------------


def _poly_term(poly, degree):
    if poly.is_zero():
        return HomogeneousTerm.zero(degree, poly.arity, poly.out_dim)
    return HomogeneousTerm.from_poly(poly, degree)


def _is_chart_bound(term):
    """True when the term can only be read inside its section chart."""
    if term.kind == "interpolant":
        return True
    return bool(term.meta.get("chart_bound"))


def _embed_rows(term, out_dim, offset):
    """Pad a block-valued term into out_dim rows starting at `offset`."""
    if term.is_zero():
        return HomogeneousTerm.zero(term.degree, term.dim_in, out_dim)
    if term.kind == "polynomial":
        comps = [{} for _ in range(out_dim)]
        for i, comp in enumerate(term.payload.comps):
            comps[offset + i] = dict(comp)
        poly = SparsePolynomial(term.dim_in, comps)
        out = HomogeneousTerm.from_poly(poly, term.degree)
        out.error_bound = term.error_bound
        out.meta = dict(term.meta)
        return out

    rows = term.dim_out

    def pay(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (out_dim,))
        out[..., offset:offset + rows] = eval_term(term, pts)
        return out

    wrapped = HomogeneousTerm(term.degree, term.dim_in, out_dim, "lazy", pay,
                              error_bound=term.error_bound,
                              meta=dict(term.meta, source=term,
                                        chart_bound=_is_chart_bound(term)))
    return wrapped


def _neg_term(term):
    if term.is_zero():
        return term
    if term.kind == "polynomial":
        return HomogeneousTerm.from_poly(term.payload.scale(-1.0), term.degree)

    def pay(pts):
        return -eval_term(term, pts)

    return HomogeneousTerm(term.degree, term.dim_in, term.dim_out, "lazy",
                           pay, error_bound=term.error_bound,
                           meta=dict(term.meta,
                                     chart_bound=_is_chart_bound(term)))


def _sum_terms(degree, dim_in, dim_out, parts):
    """Combine homogeneous terms of one degree into a single term."""
    parts = [t for t in parts if not t.is_zero()]
    if not parts:
        return HomogeneousTerm.zero(degree, dim_in, dim_out)
    for t in parts:
        if t.degree != degree or t.dim_in != dim_in or t.dim_out != dim_out:
            raise ValidationError("cannot sum terms of mismatched shape")
    if len(parts) == 1:
        return parts[0]
    err = sum(t.error_bound for t in parts)
    if all(t.kind == "polynomial" for t in parts):
        poly = parts[0].payload
        for t in parts[1:]:
            poly = poly + t.payload
        out = _poly_term(poly, degree)
        out.error_bound = err
        return out

    def pay(pts):
        out = eval_term(parts[0], pts)
        for t in parts[1:]:
            out = out + eval_term(t, pts)
        return out

    bound = any(_is_chart_bound(t) for t in parts)
    return HomogeneousTerm(degree, dim_in, dim_out, "lazy", pay,
                           error_bound=err, meta={"chart_bound": bound})


def _matvec_term(mat, scale, term, degree):
    """The product x -> mat(x) . term(x), a homogeneous term of `degree`."""

    def pay(pts):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, term.dim_in)
        out = np.einsum("pab,pb->pa", mat.evaluate(flat),
                        eval_term(term, flat))
        return out.reshape(pts.shape[:-1] + (mat.rows,))

    return HomogeneousTerm(degree, term.dim_in, mat.rows, "lazy", pay,
                           error_bound=scale * term.error_bound,
                           meta={"chart_bound": _is_chart_bound(term)})


def _commutator_term(kx, pa, Dxp, degree):
    """x -> DK_x(x) . pa(x) - D_x p(x,0) . K_x(x) for a polynomial K_x."""
    n = pa.arity

    def pay(pts):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, n)
        out = np.einsum("pab,pb->pa", kx.jacobian(flat), pa.evaluate(flat))
        out -= np.einsum("pab,pb->pa", Dxp.evaluate(flat), kx.evaluate(flat))
        return out.reshape(pts.shape[:-1] + (n,))

    return HomogeneousTerm(degree, n, n, "lazy", pay)


def _graft_identity(n, m):
    """The seed K^1(x) = (x, 0) as a degree-1 polynomial term."""
    comps = []
    for i in range(n):
        exps = [0] * n
        exps[i] = 1
        comps.append({tuple(exps): 1.0})
    comps.extend({} for _ in range(m))
    return HomogeneousTerm.from_poly(SparsePolynomial(n, comps), 1)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class InductionState:
    """The induction at order j: K^{<=j}, R^{<=j+N-1} and the error E^j.

    K is graded with the explicit degree-1 seed (x, 0); R carries the
    identity and p(.,0) explicitly, so both evaluate by plain term sums.
    The ledger records one row per produced degree: which route solved it
    and with what error bar.
    """

    j: int
    K: GradedFunction
    R: GradedFunction
    strategy: str
    ledger: list
    mapspec: object
    domain: object
    report: object
    opts: object
    grid: object
    free_kx: dict = field(default_factory=dict)

    def error(self, pts):
        """E(x) = F(K(x)) - K(R(x)) at pts (..., n) -> (..., n+m)."""
        pts = np.asarray(pts, dtype=float)
        bound = any(_is_chart_bound(t) for t in
                    self.K.term_list() + self.R.term_list())
        try:
            Kx = self.K.evaluate(pts)
            FK = self.mapspec.evaluate(Kx)
            Rx = self.R.evaluate(pts)
            if bound:
                inside = self.domain.member(Rx)
                if not np.all(inside):
                    flat = pts.reshape(-1, pts.shape[-1])
                    bad = np.nonzero(~np.asarray(inside).reshape(-1))[0][0]
                    raise LeftDomain(
                        f"R maps x = {flat[bad]} to "
                        f"{Rx.reshape(-1, Rx.shape[-1])[bad]} outside the "
                        "domain, and K contains section-bound terms that "
                        "cannot be read there", x0=flat[bad])
            KR = self.K.evaluate(Rx)
        except (OutOfDomain, NearBoundary) as exc:
            raise LeftDomain(
                "composition K(R(x)) needs a section-bound term outside "
                "its chart; R does not keep the domain invariant here") from exc
        return FK - KR


@dataclass
class Parametrization:
    """Final product: K, R to order ell plus budgets, residual and ledger."""

    K: GradedFunction
    R: GradedFunction
    ell: int
    gamma: object
    ell_f: object
    residual: object
    ledger: list
    constants: object = None
    strategy: str = "normal-form"
    name: str = "problem"


def _entry(j, block, degree, route, error_bound, **extra):
    row = {"j": int(j), "block": block, "degree": int(degree), "route": route,
           "error_bound": float(error_bound)}
    for key, val in extra.items():
        if isinstance(val, (np.floating, np.integer, np.bool_)):
            val = val.item()
        row[key] = val
    return row


def _clone(state, j):
    return InductionState(
        j=j, K=state.K.copy(), R=state.R.copy(), strategy=state.strategy,
        ledger=list(state.ledger), mapspec=state.mapspec, domain=state.domain,
        report=state.report, opts=state.opts, grid=state.grid,
        free_kx=state.free_kx)


# ---------------------------------------------------------------------------
# extraction of the leading error parts
# ---------------------------------------------------------------------------


def _products(parts, count, cap):
    """All degrees of count-fold products with factors drawn from `parts`."""
    sums = {0}
    for _ in range(count):
        sums = {s + d for s in sums for d in parts if s + d <= cap}
    return sums


def _window_degrees(state, block, d0, cfg):
    """Degrees the grade bookkeeping allows in [d0, d0 + window).

    A degree-d piece of the map composed with the graded K contributes
    sums of d term degrees of K; K o R contributes K-degrees composed with
    R-degrees.  The union over pieces is a superset of the degrees that
    can actually appear, so fitting only these keeps the ladder system
    small and anything absent simply fits to zero.
    """
    F = state.mapspec
    hi = d0 + cfg.extract_window - 1
    k_deg = set(state.K.degrees()) | {1}
    r_deg = set(state.R.degrees()) | {1}
    pieces = [F.N] if block == "x" else [F.M]
    higher = F.higher_x if block == "x" else F.higher_y
    pieces.extend(d for d, _ in higher)
    present = set(k_deg)
    for dF in pieces:
        present |= _products(k_deg, dF, hi)
    for dK in k_deg:
        present |= _products(r_deg, dK, hi)
    if F.remainder is not None:
        present |= set(range(F.r + 1, hi + 1))
    return [d for d in sorted(present) if d0 <= d <= hi]


def _extract_block(state, block, d0, cfg):
    """Leading homogeneous part of one block of E at degree d0."""
    F = state.mapspec
    n = F.n
    out_dim = n if block == "x" else F.m
    window = _window_degrees(state, block, d0, cfg)
    if d0 not in window:
        # bookkeeping rules the degree out entirely
        term = HomogeneousTerm.zero(d0, n, out_dim)
        term.meta["window"] = window
        return term

    sl = slice(0, n) if block == "x" else slice(n, n + F.m)

    def f(pts):
        return state.error(pts)[..., sl]

    # E is a difference of O(|x|) compositions, so its numerical floor
    # scales with the radius (roundoff) plus the stored term error bars;
    # below that there is nothing to fit
    lam = 0.5 * state.domain.rho
    sup = float(np.abs(f(state.grid.directions * lam)).max())
    err_sum = sum(t.error_bound * lam ** t.degree
                  for t in state.K.term_list() + state.R.term_list())
    floor = 10.0 * err_sum + 1e-13 * lam
    if sup <= floor:
        term = HomogeneousTerm.zero(d0, n, out_dim)
        term.error_bound = sup / lam ** d0
        term.meta.update(window=window, note="below the evaluation floor")
        return term

    cap = cfg.degree_cap_factor * max(cfg.ell, F.N, F.M)
    terms = extract_homogeneous(f, window, state.grid, degree_cap=cap)
    term = terms[d0]
    rec = polynomial_reconstruction(term)
    if rec is not None and rec is not term:
        # polynomial backend evaluates anywhere; keep the extraction record
        rec.error_bound = max(rec.error_bound, term.error_bound)
        rec.meta.update({k: v for k, v in term.meta.items()
                         if k not in rec.meta})
        term = rec
    term.meta["window"] = window
    return term


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def initialize(F, D, report=None, opts=None, free_kx=None):
    """Seed the induction at j = 1: K = (x, 0), R = x + p(x, 0).

    Verifies the standing hypotheses (or accepts a precomputed report);
    failures raise HypothesisFailure unless the run options force past
    them.  The initial error is E^1 = (f(x,0), g(x,0)) and needs no
    special casing: the pointwise evaluator reproduces it exactly.
    """
    opts = opts if opts is not None else RunOptions()
    opts.validate()
    if report is None:
        report = check_hypotheses(F, D)
    report.raise_if_failed(force=opts.force)

    n, m, N = F.n, F.m, F.N
    K = GradedFunction(n, n + m)
    K.add_term(_graft_identity(n, m))
    R = GradedFunction(n, n)
    R.add_term(_poly_term(SparsePolynomial.identity(n), 1))
    R.add_term(_poly_term(F.pa(), N))

    free = {}
    for deg, poly in (free_kx or {}).items():
        if poly.arity != n or poly.out_dim != n:
            raise ValidationError(f"free K_x term at degree {deg} must map "
                                  f"R^{n} to R^{n}")
        if not poly.is_homogeneous(deg) and not poly.is_zero():
            raise ValidationError(f"free K_x term at degree {deg} is not "
                                  "homogeneous of that degree")
        free[int(deg)] = poly

    ledger = [
        _entry(1, "K", 1, "seed", 0.0, note="K^1 = (x, 0)"),
        _entry(1, "R", N, "seed", 0.0, note="R^N = p(x, 0)"),
    ]
    return InductionState(
        j=1, K=K, R=R, strategy=opts.strategy, ledger=ledger, mapspec=F,
        domain=D, report=report, opts=opts,
        grid=CrossSectionGrid(D, opts.nodes), free_kx=free)


def _annotate(exc, block, j):
    out = DivergentCohomologicalIntegral(
        f"{block}-block at degree {j}: {exc}", degree=j,
        kappa_hat=exc.kappa_hat, diagnostics=exc.diagnostics)
    return out


def _solve_ky(state, ey, j, cfg):
    """K_y^j by the M-vs-N case split; returns (term, ledger row)."""
    F, D = state.mapspec, state.domain
    n, m, N, M = F.n, F.m, F.N, F.M
    if ey.is_zero():
        return (HomogeneousTerm.zero(j, n, m),
                _entry(j, "K_y", j, "zero", 0.0,
                       note="no y-forcing at this degree"))
    if M < N:
        res = solve_algebraic(F.Dyq0(), ey, D, opts=cfg)
        row = _entry(j, "K_y", j, "algebraic", res.term.error_bound,
                     pde_residual=res.diagnostics.get("pde_residual"),
                     pencil_cond=res.diagnostics.get("pencil_cond"),
                     result=res)
        return res.term, row
    Q = F.Dyq0() if M == N else None
    prob = CohomologicalProblem(pa=F.pa(), Q=Q, w=ey, nu=j - 1, domain=D)
    try:
        res = solve_general(prob, opts=cfg, grid=state.grid)
    except DivergentCohomologicalIntegral as exc:
        raise _annotate(exc, "y", j) from exc
    row = _entry(j, "K_y", j, "general", res.term.error_bound,
                 margin=res.diagnostics.get("margin"),
                 kappa_hat=res.diagnostics.get("kappa_hat"),
                 pde_residual=res.diagnostics.get("pde_residual"),
                 result=res)
    return res.term, row


def induction_step(state, F=None, D=None, cfg=None):
    """One order of the induction: consume the state at j, return j+1."""
    F = F if F is not None else state.mapspec
    D = D if D is not None else state.domain
    cfg = cfg if cfg is not None else state.opts
    j = state.j + 1
    if j + F.N > cfg.ell + 1:
        raise ValidationError(
            f"step to order {j} needs degree {j + F.N - 1} > ell = {cfg.ell}")

    n, m, N, L = F.n, F.m, F.N, F.L
    cc = state.report.constants
    new = _clone(state, j)

    ex = _extract_block(state, "x", j + N - 1, cfg)
    ey = _extract_block(state, "y", j + L - 1, cfg)

    ky, row = _solve_ky(state, ey, j, cfg)
    new.ledger.append(row)
    new.K.add_term(_embed_rows(ky, n + m, n))

    # x-block forcing w = E_x^{j+N-1} + D_y p(x,0) K_y^j
    dyp = F.Dyp0()
    parts = [ex]
    if not dyp.is_zero() and not ky.is_zero():
        scale = float(np.abs(dyp.evaluate(state.grid.directions)).max())
        parts.append(_matvec_term(dyp, scale, ky, j + N - 1))
    wx = _sum_terms(j + N - 1, n, n, parts)

    try:
        mg = solvability_margin(j - 1, cc.a_p, cc.b_p, cc.A_p, -cc.B_p)
        margin = float(mg.margin)
    except BudgetUndefined:
        margin = None          # no certificate arithmetic (a_p <= 0)
    tie = bool(margin is not None and abs(margin) <= _MARGIN_TIE * max(1.0, j))
    solvable = margin is not None and margin > 0 and not tie

    normal_form = state.strategy == "normal-form" and solvable
    if normal_form or cfg.force_zero_r:
        # R^{j+N-1} = 0; K_x^j from the transport equation with Q = D_x p
        if wx.is_zero():
            kx = HomogeneousTerm.zero(j, n, n)
            new.ledger.append(_entry(j, "K_x", j, "zero", 0.0,
                                     margin=margin,
                                     note="no x-forcing at this degree"))
        else:
            prob = CohomologicalProblem(pa=F.pa(), Q=F.Dxp0(), w=wx,
                                        nu=j - 1, domain=D)
            try:
                res = solve_general(prob, opts=cfg, grid=state.grid)
            except DivergentCohomologicalIntegral as exc:
                raise _annotate(exc, "x", j) from exc
            kx = res.term
            new.ledger.append(_entry(
                j, "K_x", j, "general", kx.error_bound, margin=margin,
                kappa_hat=res.diagnostics.get("kappa_hat"),
                pde_residual=res.diagnostics.get("pde_residual"),
                result=res))
        new.K.add_term(_embed_rows(kx, n + m, 0))
        note = ("forced R = 0" if cfg.force_zero_r and not normal_form
                else "solvability margin positive")
        new.ledger.append(_entry(j, "R", j + N - 1, "normal-form", 0.0,
                                 margin=margin, note=note))
        return new

    # free branch: K_x^j is whatever the strategy supplies (default 0) and
    # the forcing goes to R^{j+N-1} = w - [DK_x . p(.,0) - D_x p(.,0) K_x]
    kx_poly = state.free_kx.get(j)
    if kx_poly is not None and not kx_poly.is_zero():
        kx = _poly_term(kx_poly, j)
        rterm = _sum_terms(j + N - 1, n, n, [
            wx, _neg_term(_commutator_term(kx_poly, F.pa(), F.Dxp0(),
                                           j + N - 1))])
        kx_note = "supplied polynomial"
    else:
        kx = HomogeneousTerm.zero(j, n, n)
        rterm = wx
        kx_note = "default 0"
    new.K.add_term(_embed_rows(kx, n + m, 0))
    new.R.add_term(rterm)
    new.ledger.append(_entry(j, "K_x", j, "free", kx.error_bound,
                             margin=margin, note=kx_note))
    note = "margin within noise of 0: conservative branch" if tie else \
        ("free strategy" if state.strategy == "free-kx"
         else "solvability margin not positive")
    new.ledger.append(_entry(j, "R", j + N - 1,
                             "zero" if rterm.is_zero() else "stored",
                             rterm.error_bound, margin=margin,
                             margin_tie=tie, note=note))
    return new


def tail_sweep(state, F=None, ell=None, cfg=None):
    """Finish the y-block when M < N (the x-block ran out of degrees).

    For j = ell-N+2 .. ell-L+1 the x-part of E is already past order ell,
    and the y-equation at each remaining degree is the same algebraic
    system D_y q(x,0) K_y^j = -E_y^{j+L-1} with K_x^j = 0.
    """
    F = F if F is not None else state.mapspec
    cfg = cfg if cfg is not None else state.opts
    ell = ell if ell is not None else cfg.ell
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
        ey = _extract_block(cur, "y", j + L - 1, cfg)
        new = _clone(cur, j)
        if ey.is_zero():
            ky = HomogeneousTerm.zero(j, n, m)
            new.ledger.append(_entry(j, "K_y", j, "zero", 0.0,
                                     note="tail sweep: no y-forcing"))
        else:
            res = solve_algebraic(F.Dyq0(), ey, cur.domain, opts=cfg)
            ky = res.term
            new.ledger.append(_entry(
                j, "K_y", j, "algebraic", ky.error_bound,
                pde_residual=res.diagnostics.get("pde_residual"),
                pencil_cond=res.diagnostics.get("pencil_cond"),
                note="tail sweep", result=res))
        new.K.add_term(_embed_rows(ky, n + m, n))
        new.ledger.append(_entry(j, "K_x", j, "zero", 0.0,
                                 note="tail sweep: x-block past order ell"))
        cur = new
    return cur


def run(problem, free_kx=None, measure_residual=True):
    """Full pipeline for a map document: hypotheses, induction, budgets.

    Returns a Parametrization; errors from any stage propagate annotated
    with the failing degree and block.
    """
    if problem.kind != "map":
        raise ValidationError(
            "run expects a map document; field documents go through flows")
    cfg = problem.run
    cfg.validate()
    F, D = problem.mapspec, problem.domain

    report = check_hypotheses(F, D)
    state = initialize(F, D, report, opts=cfg, free_kx=free_kx)
    for _ in range(2, cfg.ell - F.N + 2):
        state = induction_step(state, F, D, cfg)
    if F.M < F.N:
        state = tail_sweep(state, F, cfg.ell, cfg)

    try:
        budget = regularity_budget(report.constants, cfg.ell)
        gamma, ell_f = budget.gamma, budget.ell_f
    except BudgetUndefined as exc:
        if not cfg.force:
            raise
        gamma, ell_f = None, None
        state.ledger.append(_entry(state.j, "budget", cfg.ell, "undefined",
                                   0.0, note=str(exc)))

    residual = None
    if measure_residual:
        from .verify import residual_order
        residual = residual_order(F, D, state.K, state.R, cfg)

    return Parametrization(
        K=state.K, R=state.R, ell=cfg.ell, gamma=gamma, ell_f=ell_f,
        residual=residual, ledger=state.ledger, constants=report.constants,
        strategy=cfg.strategy, name=problem.name)
