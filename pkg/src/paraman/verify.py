"""Quantitative verification: residual slope fits and invariant checks.

The order claim behind a finished parametrization is asymptotic -- the
invariance error vanishes to order ell at the fixed point -- which is
not directly measurable.  What is measurable, and generically true here
because the next error term is polynomial-led, is a log-log slope:
sample the residual along rays of the section at a geometric ladder of
radii and fit ||E|| ~ C r^s per ray by least squares.  The verdict asks
s >= ell + slope_margin on every ray (default margin 0.9, since a
polynomial-led remainder has slope >= ell + 1); a genuinely
non-polynomial next order (logarithmic factors) can legitimately sit
below that, so slopes in (ell + 0.1, ell + margin) pass with a
log-suspect flag instead of failing.

Rays include near-boundary directions (5% of the chart span from each
end) because trouble tends to show at the edge of the cone first.
Points whose forward image leaves the covered chart are dropped from
the fit, never extrapolated.  Samples below the absolute floor 1e-13
are machine noise and are likewise excluded; a ray -- or a whole
report -- where everything sits at the floor is exact invariance and
passes as such.

Everything here is embarrassingly parallel over rays; plain numpy
batching is fast enough that no actual parallelism is used.
"""

from dataclasses import dataclass, field

import numpy as np

from .constants import check_hypotheses
from .errors import (
    DegenerateFit, DivergentCohomologicalIntegral, HypothesisFailure,
    LeftDomain, NearBoundary, OutOfDomain,
)
from .graded import differentiate_term, eval_term

__all__ = [
    "RayFit", "ResidualReport", "SuiteReport", "fit_slope", "residual_rays",
    "radius_ladder", "residual_order", "residual_order_flow",
    "invariant_suite",
]

N_RAYS = 12
N_RADII = 10
RADIUS_RATIO = 0.55
FLOOR = 1e-13
LOG_SUSPECT_BAND = 0.1
_EVAL_ERRORS = (LeftDomain, NearBoundary, OutOfDomain)


# ---------------------------------------------------------------------------
# sampling geometry
# ---------------------------------------------------------------------------


def residual_rays(domain, count=N_RAYS):
    """Unit directions spread over the section, edges included.

    Non-periodic charts get `count` directions from 5% inside one end to
    5% inside the other; periodic charts get an even half-step-offset
    spread (midpoint sampling keeps the rays off symmetry axes, where
    residuals can vanish identically and the fit would see only
    interpolation noise); a point chart (1-D ray domain) has exactly one
    direction.
    """
    chart = domain.section_chart()
    if chart.kind == "point":
        return chart.direction(np.zeros(1))
    if chart.periodic:
        s = chart.lo + chart.span * (np.arange(count) + 0.5) / count
    else:
        span = chart.hi - chart.lo
        s = np.linspace(chart.lo + 0.05 * span, chart.hi - 0.05 * span, count)
    return chart.direction(s)


def radius_ladder(domain, count=N_RADII, ratio=RADIUS_RATIO):
    """Strictly decreasing geometric radii in (0, rho/2]."""
    return 0.5 * domain.rho * ratio ** np.arange(count)


def fit_slope(radii, values, floor=FLOOR):
    """Least-squares slope of log(values) vs log(radii) above the floor.

    Returns (slope, intercept, r_squared, n_points).  Points at or below
    `floor` (NaN included) carry no order information and are dropped;
    fewer than two usable points is a DegenerateFit.
    """
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = values > floor          # False for NaN as well
    if keep.sum() < 2:
        raise DegenerateFit(
            f"{int(keep.sum())} of {values.size} residual samples above the "
            f"floor {floor:g}: nothing to fit")
    x, y = np.log(radii[keep]), np.log(values[keep])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if tot == 0.0 else 1.0 - float(((y - pred) ** 2).sum()) / tot
    return float(slope), float(intercept), float(r2), int(keep.sum())


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class RayFit:
    """Fit of one (block, ray) series; at_floor means nothing to fit."""

    block: str
    index: int
    direction: np.ndarray
    slope: float | None
    intercept: float | None
    r2: float | None
    n_points: int
    at_floor: bool


@dataclass
class ResidualReport:
    """Per-ray slope fits of the invariance residual, with verdict."""

    rays: np.ndarray
    radii: np.ndarray
    fits: list
    samples: dict                  # block -> (n_rays, n_radii), NaN = no data
    ell: int
    slope_margin: float
    floor: float = FLOOR
    passed: bool = False
    log_suspect: bool = False
    degenerate: bool = False
    note: str = ""
    min_slope: float | None = None

    def fitted(self, block=None):
        return [f for f in self.fits if not f.at_floor
                and (block is None or f.block == block)]

    def min_slope_block(self, block):
        fits = self.fitted(block)
        return min(f.slope for f in fits) if fits else None

    def block_passed(self, block):
        m = self.min_slope_block(block)
        return True if m is None else m >= self.ell + LOG_SUSPECT_BAND

    def rows(self):
        """Long-format (block, ray, radius, residual) rows for plotting."""
        out = []
        for block, vals in sorted(self.samples.items()):
            for i in range(len(self.rays)):
                for j, r in enumerate(self.radii):
                    v = vals[i, j]
                    if np.isfinite(v):
                        out.append((block, i, float(r), float(v)))
        return out


def _assemble(samples, rays, radii, ell, margin, floor=FLOOR):
    fits = []
    for block in sorted(samples):
        vals = samples[block]
        for i in range(len(rays)):
            try:
                s, b, r2, npts = fit_slope(radii, vals[i], floor)
                fits.append(RayFit(block, i, rays[i], s, b, r2, npts, False))
            except DegenerateFit:
                npts = int((vals[i] > floor).sum())
                fits.append(RayFit(block, i, rays[i], None, None, None,
                                   npts, True))
    rep = ResidualReport(rays=rays, radii=radii, fits=fits, samples=samples,
                         ell=ell, slope_margin=margin, floor=floor)
    fitted = rep.fitted()
    if not fitted:
        rep.degenerate = True
        rep.passed = True
        rep.note = "residual at machine floor everywhere: exact invariance"
        return rep
    rep.min_slope = min(f.slope for f in fitted)
    target = ell + margin
    if rep.min_slope >= target:
        rep.passed = True
        rep.note = (f"min ray slope {rep.min_slope:.3f} >= "
                    f"{ell} + {margin:g}")
    elif rep.min_slope > ell + LOG_SUSPECT_BAND:
        rep.passed = True
        rep.log_suspect = True
        rep.note = (f"min ray slope {rep.min_slope:.3f} in "
                    f"({ell} + {LOG_SUSPECT_BAND}, {target:g}): accepted, "
                    "next order may carry a log factor")
    else:
        rep.passed = False
        rep.note = (f"min ray slope {rep.min_slope:.3f} < {target:g}: "
                    f"order {ell} not reached")
    return rep


# ---------------------------------------------------------------------------
# residual sampling
# ---------------------------------------------------------------------------


def _map_samples(F, K, R, rays, radii):
    n = F.n
    nr, nl = len(rays), len(radii)
    out = {"x": np.full((nr, nl), np.nan), "y": np.full((nr, nl), np.nan)}
    for i, u in enumerate(rays):
        for j, lam in enumerate(radii):
            x = (lam * u)[None, :]
            try:
                e = F.evaluate(K.evaluate(x)) - K.evaluate(R.evaluate(x))
            except _EVAL_ERRORS:
                continue
            out["x"][i, j] = np.abs(e[0, :n]).max()
            out["y"][i, j] = np.abs(e[0, n:]).max()
    return out


def _flow_samples(X, K, Y, rays, radii, phases):
    from .flows import flow_error

    tgrid = np.arange(phases) * (X.period / phases)
    nr, nl = len(rays), len(radii)
    vals = np.full((nr, nl), np.nan)
    for i, u in enumerate(rays):
        pts = radii[:, None] * u[None, :]
        try:
            E = flow_error(X, K, Y, pts, tgrid)
            vals[i] = np.abs(E).max(axis=(0, 2))
        except _EVAL_ERRORS:
            for j, lam in enumerate(radii):
                try:
                    E = flow_error(X, K, Y, (lam * u)[None, :], tgrid)
                    vals[i, j] = np.abs(E).max()
                except _EVAL_ERRORS:
                    continue
    return {"flow": vals}


def residual_order(F, D, K, R, cfg):
    """Slope-fit report for the map residual F(K(x)) - K(R(x))."""
    rays = residual_rays(D)
    radii = radius_ladder(D)
    samples = _map_samples(F, K, R, rays, radii)
    return _assemble(samples, rays, radii, cfg.ell,
                     getattr(cfg, "slope_margin", 0.9))


def residual_order_flow(X, D, K, Y, cfg):
    """Slope-fit report for the flow residual X(K) - D_xK Y - dK/dt.

    The residual at each (ray, radius) is the max over the components
    and over a uniform phase grid covering one period.
    """
    rays = residual_rays(D)
    radii = radius_ladder(D)
    samples = _flow_samples(X, K, Y, rays, radii, cfg.phases)
    return _assemble(samples, rays, radii, cfg.ell,
                     getattr(cfg, "slope_margin", 0.9))


# ---------------------------------------------------------------------------
# invariant suite
# ---------------------------------------------------------------------------


@dataclass
class SuiteReport:
    """Machine-readable outcome per check: status pass | fail | xfail."""

    rows: list = field(default_factory=list)

    def add(self, check, status, detail=""):
        self.rows.append({"check": check, "status": status, "detail": detail})

    @property
    def passed(self):
        return all(r["status"] != "fail" for r in self.rows)

    def failures(self):
        return [r for r in self.rows if r["status"] == "fail"]

    def __getitem__(self, check):
        for r in self.rows:
            if r["check"] == check:
                return r
        raise KeyError(check)


def _artifact_terms(par):
    """(label, HomogeneousTerm) pairs for every coefficient in K (+R/Y)."""
    out = []
    if hasattr(par.K, "term_list") and hasattr(par, "R"):       # map case
        out += [("K", t) for t in par.K.term_list()]
        out += [("R", t) for t in par.R.term_list()]
    else:                                                       # flow case
        for pt in par.K.term_list():
            out += [("K", t) for t in pt.coefficient_terms()]
        out += [("Y", t) for t in par.Y.term_list()]
    return out


def _check_homogeneity(suite, par, dirs):
    lam, bad = 0.37, []
    for label, t in _artifact_terms(par):
        if t.kind == "zero":
            continue
        try:
            a = eval_term(t, lam * dirs)
            b = lam ** t.degree * eval_term(t, dirs)
        except _EVAL_ERRORS:
            continue
        scale = max(float(np.abs(b).max()), 1e-30)
        gap = float(np.abs(a - b).max()) / scale
        if gap > 1e-9 + 10.0 * t.error_bound / scale:
            bad.append(f"{label}^{t.degree}: relative gap {gap:.3g}")
    if bad:
        suite.add("homogeneity", "fail", "; ".join(bad))
    else:
        suite.add("homogeneity", "pass",
                  f"{len(_artifact_terms(par))} terms scale as lam^degree")


def _check_degree_bounds(suite, par, spec):
    ell, N, L = par.ell, spec.N, spec.L
    caps = {"K_x": ell - N + 1, "K_y": ell - L + 1, "R": ell,
            "K_x-osc": ell, "K_y-osc": ell, "Y": ell, "K": ell - L + 1}
    bad = []
    for row in par.ledger:
        cap = caps.get(row["block"])
        if cap is None or row["route"] in ("zero", "seed"):
            continue
        if row["degree"] > cap:
            bad.append(f"{row['block']} at degree {row['degree']} > {cap}")
    suite.add("degree-bounds", "fail" if bad else "pass", "; ".join(bad))


def _check_ledger(suite, par):
    seen, bad = set(), []
    for row in par.ledger:
        key = (row["block"], row["degree"])
        if key in seen:
            bad.append(f"duplicate entry {key}")
        seen.add(key)
        eb = row.get("error_bound", 0.0)
        if not np.isfinite(eb) or eb < 0:
            bad.append(f"{key}: error bound {eb}")
    suite.add("ledger", "fail" if bad else "pass",
              "; ".join(bad) or f"{len(par.ledger)} rows consistent")


def _check_pde_residuals(suite, par, spec, domain, tol=1e-4):
    """Re-measure the defining equation of every recorded solve.

    Transport solves are checked against Dh pa - Q h = w, algebraic
    fibre solves against Q_y h = -E.  Deliberately evaluates through the
    stored term itself -- spline and finite differences included --
    rather than asking the solver to re-integrate, so a damaged artifact
    fails here even though a fresh quadrature would come out clean.  The
    tolerance leaves room for the spline-derivative error of a healthy
    interpolant.
    """
    from .cohomology import _Forcing, _residual

    chart = domain.section_chart()
    if chart.kind == "point":
        params = np.zeros(1)
    elif chart.periodic:
        params = chart.lo + chart.span * (np.arange(24) + 0.5) / 24
    else:
        params = np.linspace(chart.lo + 0.05 * chart.span,
                             chart.hi - 0.05 * chart.span, 24)
    dirs = chart.direction(params)
    checked, bad = 0, []
    for row in par.ledger:
        res = row.get("result")
        if res is None or getattr(res, "problem", None) is None:
            continue
        prob = res.problem
        try:
            h = eval_term(res.term, dirs)
            w_v = _Forcing(prob.w)(dirs)
            wscale = max(float(np.abs(w_v).max()), 1e-30)
            if prob.pa.is_zero():        # fibre identity, no transport
                qy = np.einsum("pab,pb->pa", spec.Dyq0().evaluate(dirs), h)
                gap = float(np.abs(qy + w_v).max()) / wscale
            else:
                dh = differentiate_term(res.term, dirs)
                gap = _residual(prob, h, dh, dirs, wscale)
        except _EVAL_ERRORS:
            continue
        checked += 1
        if gap > tol:
            bad.append(f"{row['block']} degree {row['degree']}: "
                       f"relative gap {gap:.3g}")
    if bad:
        suite.add("pde-residual", "fail", "; ".join(bad))
    else:
        suite.add("pde-residual", "pass",
                  f"{checked} recorded solves re-measured below {tol:g}")


def _check_residual_grade(suite, doc, par):
    """The error must carry no content at grades <= ell: quick slope fit."""
    spec, D, cfg = doc.mapspec, doc.domain, doc.run
    try:
        if hasattr(par, "R"):
            rep = residual_order(spec, D, par.K, par.R, cfg)
        else:
            rep = residual_order_flow(doc.spec, D, par.K, par.Y, cfg)
    except _EVAL_ERRORS as exc:
        suite.add("residual-grade", "fail", f"evaluation failed: {exc}")
        return
    if rep.degenerate:
        suite.add("residual-grade", "pass", rep.note)
    elif rep.min_slope > par.ell + LOG_SUSPECT_BAND:
        suite.add("residual-grade", "pass",
                  f"min ray slope {rep.min_slope:.3f} > {par.ell} "
                  f"+ {LOG_SUSPECT_BAND}")
    else:
        suite.add("residual-grade", "fail",
                  f"min ray slope {rep.min_slope:.3f}: content at or below "
                  f"grade {par.ell}")


def _check_constants(suite, par):
    cc = par.constants
    if cc is None:
        suite.add("constants", "fail", "no constants attached")
        return
    bad = []
    if not (np.isfinite(cc.a_p)):
        bad.append(f"a_p = {cc.a_p}")
    if cc.a_p <= 0:
        bad.append(f"a_p = {cc.a_p:.6g} <= 0 (no decay)")
    for name in ("b_p", "A_p", "B_p", "B_q", "A_q", "a_V"):
        v = getattr(cc, name)
        if not np.isfinite(v):
            bad.append(f"{name} = {v}")
    if par.gamma is not None and par.gamma < 1:
        bad.append(f"gamma = {par.gamma} < 1")
    suite.add("constants", "fail" if bad else "pass", "; ".join(bad))


def _check_residual_report(suite, par):
    rep = par.residual
    if rep is None:
        suite.add("residual-report", "pass", "not measured on this run")
        return
    bad = []
    if not np.all(np.diff(rep.radii) < 0):
        bad.append("radii not strictly decreasing")
    if any(not np.isfinite(f.slope) for f in rep.fitted()):
        bad.append("non-finite fitted slope")
    if not rep.passed:
        bad.append(rep.note)
    suite.add("residual-report", "fail" if bad else "pass",
              "; ".join(bad) or rep.note)


def invariant_suite(doc, par=None, cfg=None):
    """Run every structural check against a document and its artifacts.

    Failures are data (status "fail"), never exceptions.  When the
    construction itself cannot finish because a transport integral is
    diagnosed divergent, that diagnosis is the expected outcome for
    such a document and is reported as status "xfail".
    """
    if cfg is not None:
        import dataclasses
        doc = dataclasses.replace(doc, run=cfg)
    suite = SuiteReport()
    spec, D = doc.mapspec, doc.domain

    try:
        hearing = check_hypotheses(spec, D)
        for name in sorted(hearing.verdicts):
            suite.add(f"hypothesis-{name}",
                      "pass" if hearing.verdicts[name] else "fail",
                      hearing.details[name])
    except Exception as exc:            # constants estimation itself failed
        suite.add("hypotheses", "fail", str(exc))
        return suite

    if par is None:
        try:
            if doc.kind == "field":
                from .flows import run_flow
                par = run_flow(doc, measure_residual=False)
            else:
                from .parametrize import run
                par = run(doc, measure_residual=False)
        except DivergentCohomologicalIntegral as exc:
            suite.add("construction", "xfail",
                      f"diagnosed divergence: {exc}")
            return suite
        except HypothesisFailure as exc:
            suite.add("construction", "fail", str(exc))
            return suite

    _check_homogeneity(suite, par, residual_rays(D))
    _check_degree_bounds(suite, par, spec)
    _check_ledger(suite, par)
    _check_pde_residuals(suite, par, spec, D)
    _check_residual_grade(suite, doc, par)
    _check_constants(suite, par)
    _check_residual_report(suite, par)
    return suite
