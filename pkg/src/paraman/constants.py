"""Sampled sup/inf constants, hypothesis checks and regularity budgets.

Every constant here is defined as the supremum (or infimum) of an explicit
quotient over the punctured star-shaped neighbourhood V_rho.  Estimation is
deterministic: a fixed section x radius product grid with near-boundary seeds,
then a few rounds of local densification around the running extremes, so two
runs on the same problem produce identical numbers.

Sign conventions (map form F(x) = x + p(x) + ...):

    a_p  = -sup (||x + p(x,0)|| - ||x||) / ||x||^N        decay floor
    b_p  =  sup ||p(x,0)|| / ||x||^N                      decay ceiling
    A_p  = -sup (||I + D_x p(x,0)|| - 1) / ||x||^(N-1)    tangential contraction
    B_p  =  sup (||I - D_x p(x,0)|| - 1) / ||x||^(N-1)    tangential expansion
    B_q  = -sup (||I - D_y q(x,0)|| - 1) / ||x||^(M-1)    fibre contraction
    A_q  =  sup (||I + D_y q(x,0)|| - 1) / ||x||^(M-1)
    a_V  =  inf dist(x + p(x,0), complement of V_rho) / ||x||^N

with the selection rule c = a if B <= 0 else b and d = a if A <= 0 else b
whenever a quotient bound needs the matching zeroth-order constant.
"""

import dataclasses
import numpy as np

from .errors import (BudgetUndefined, EmptyDomainSample, HypothesisFailure,
                     ValidationError)
from .model import DomainSpec, MatrixPoly, SparsePolynomial


@dataclasses.dataclass
class ConstantsConfig:
    """Sampling layout.  Default pool comfortably exceeds 10^3 points."""

    section_interior: int = 113      # interior chart parameters (intervals)
    section_circle: int = 128        # directions on periodic charts
    radii_count: int = 9
    radius_ratio: float = 0.62
    near_boundary: tuple = (1e-3, 1e-5, 1e-7)
    refine_rounds: int = 3
    refine_fraction: float = 0.05
    refine_cap: int = 12             # extremes tracked per quotient per round
    refine_density: int = 10
    min_budget: int = 1000
    rho_levels: tuple = (1.0, 0.5, 0.25)   # report rows at these fractions of rho


DEFAULT_CONFIG = ConstantsConfig()

_RADIAL_EPS = 1e-9   # keep the outermost radius strictly inside rho


# ---------------------------------------------------------------------------
# sample pools
# ---------------------------------------------------------------------------

def _section_params(chart, cfg):
    """Base chart parameters, their local spacing, for one cross-section."""
    if chart.kind == "point":
        return np.zeros(1), np.ones(1)
    if chart.periodic:
        s = np.linspace(chart.lo, chart.hi, cfg.section_circle, endpoint=False)
        ds = np.full(s.shape, chart.span / cfg.section_circle)
        return s, ds
    span = chart.span
    core = np.linspace(chart.lo, chart.hi, cfg.section_interior + 2)[1:-1]
    seeds = []
    for d in cfg.near_boundary:
        seeds.append(chart.lo + d * span)
        seeds.append(chart.hi - d * span)
    s = np.concatenate([core, np.array(seeds)])
    ds = np.full(s.shape, span / (cfg.section_interior + 1))
    # near-boundary seeds get a spacing matching their distance to the wall
    ds[len(core):] = np.repeat(np.asarray(cfg.near_boundary), 2) * span
    order = np.argsort(s)
    return s[order], ds[order]


def _radius_ladder(domain, cfg, n_min=1):
    top = domain.rho * (1.0 - _RADIAL_EPS)
    count = max(cfg.radii_count, n_min)
    if count == cfg.radii_count:
        r = top * cfg.radius_ratio ** np.arange(count)
    else:
        # budget-driven densification for 1-d sections: same span, more rungs
        lo = top * cfg.radius_ratio ** (cfg.radii_count - 1)
        r = np.geomspace(lo, top, count)
    dlr = np.full(r.shape, abs(np.log(cfg.radius_ratio)))
    return r, dlr


class _Pool:
    """Flat (s, r) sample of V_rho with per-point spacings for refinement."""

    def __init__(self, domain, cfg):
        self.domain = domain
        self.cfg = cfg
        self.chart = domain.section_chart()
        s, ds = _section_params(self.chart, cfg)
        need = int(np.ceil(cfg.min_budget / max(len(s), 1)))
        r, dlr = _radius_ladder(domain, cfg, n_min=need)
        S, R = np.meshgrid(s, r, indexing="ij")
        DS, DLR = np.meshgrid(ds, dlr, indexing="ij")
        self.s = S.ravel()
        self.r = R.ravel()
        self.ds = DS.ravel()
        self.dlr = DLR.ravel()
        self._mask_members()
        if self.s.size == 0:
            raise EmptyDomainSample(
                f"no sample points inside {domain.kind} of radius {domain.rho}")

    def _mask_members(self):
        pts = self.points()
        keep = self.domain.member(pts)
        for name in ("s", "r", "ds", "dlr"):
            setattr(self, name, getattr(self, name)[keep])

    def points(self):
        u = self.chart.direction(self.s)
        return u * self.r[..., None]

    def add_children(self, idx):
        """Densify around pool indices `idx` by refine_density in each axis."""
        if len(idx) == 0:
            return
        cfg = self.cfg
        ks = np.arange(1, cfg.refine_density // 2 + 1)
        offs = np.concatenate([-ks[::-1], ks]).astype(float) / cfg.refine_density
        new_s, new_r, new_ds, new_dlr = [], [], [], []
        for i in idx:
            si, ri, dsi, dlri = self.s[i], self.r[i], self.ds[i], self.dlr[i]
            if self.chart.kind != "point":
                cs = si + offs * dsi
                if self.chart.periodic:
                    cs = self.chart.wrap(cs)
                else:
                    eps = 1e-12 * self.chart.span
                    cs = np.clip(cs, self.chart.lo + eps, self.chart.hi - eps)
                new_s.append(cs)
                new_r.append(np.full(cs.shape, ri))
                new_ds.append(np.full(cs.shape, dsi / cfg.refine_density))
                new_dlr.append(np.full(cs.shape, dlri))
            cr = ri * np.exp(offs * dlri)
            cr = np.clip(cr, 0.0, self.domain.rho * (1.0 - _RADIAL_EPS))
            cr = cr[cr > 0]
            new_s.append(np.full(cr.shape, si))
            new_r.append(cr)
            new_ds.append(np.full(cr.shape, dsi))
            new_dlr.append(np.full(cr.shape, dlri / cfg.refine_density))
        self.s = np.concatenate([self.s] + new_s)
        self.r = np.concatenate([self.r] + new_r)
        self.ds = np.concatenate([self.ds] + new_ds)
        self.dlr = np.concatenate([self.dlr] + new_dlr)
        self._dedupe()
        self._mask_members()

    def _dedupe(self):
        key = np.round(self.s, 14) + 1j * np.round(np.log(self.r), 14)
        _, keep = np.unique(key, return_index=True)
        keep.sort()
        for name in ("s", "r", "ds", "dlr"):
            setattr(self, name, getattr(self, name)[keep])


def _run_extremes(pool, quotients, senses, cfg):
    """Refine around running extremes; returns final quotient arrays."""
    qs = quotients(pool.points(), pool.r)
    for _ in range(cfg.refine_rounds):
        targets = set()
        for name, q in qs.items():
            v = q if senses[name] > 0 else -q
            k = max(1, min(cfg.refine_cap, int(np.ceil(cfg.refine_fraction * v.size))))
            part = np.argpartition(v, -k)[-k:]
            targets.update(int(i) for i in part)
        pool.add_children(sorted(targets))
        qs = quotients(pool.points(), pool.r)
    return qs


def _extreme(pool, q, sense):
    i = int(np.argmax(q)) if sense > 0 else int(np.argmin(q))
    return q[i], pool.points()[i]


# ---------------------------------------------------------------------------
# map-level constants
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ConstantsReport:
    N: int
    M: int
    rho: float
    a_p: float
    b_p: float
    A_p: float
    B_p: float
    B_q: float
    A_q: float
    a_V: float
    witnesses: dict
    per_rho: list
    sample_size: int
    warnings: list
    meta: dict

    @property
    def c_p(self):
        return self.a_p if self.B_q <= 0 else self.b_p

    @property
    def d_p(self):
        return self.a_p if self.A_p <= 0 else self.b_p

    def as_rows(self):
        """(name, value) pairs in a stable order, for reports."""
        out = [("rho", self.rho)]
        for k in ("a_p", "b_p", "A_p", "B_p", "B_q", "A_q", "a_V", "c_p", "d_p"):
            out.append((k, getattr(self, k)))
        return out


def _map_quotients(mapspec, domain):
    n, m = mapspec.n, mapspec.m
    N, M = mapspec.N, mapspec.M
    pa = mapspec.pa()
    dxp = mapspec.Dxp0()
    dyq = mapspec.Dyq0()
    nx, ny = domain.norm_x, domain.norm_y
    eye_n = np.eye(n)
    eye_m = np.eye(m)

    def quotients(pts, r):
        pax = pa.evaluate(pts)
        jx = dxp.evaluate(pts)
        jy = dyq.evaluate(pts)
        rn = r ** N
        rn1 = r ** (N - 1)
        rm1 = r ** (M - 1)
        return {
            "a": (nx.vec(pts + pax) - r) / rn,
            "b": nx.vec(pax) / rn,
            "A": (nx.op(eye_n + jx) - 1.0) / rn1,
            "B": (nx.op(eye_n - jx) - 1.0) / rn1,
            "Bq": (ny.op(eye_m - jy) - 1.0) / rm1,
            "Aq": (ny.op(eye_m + jy) - 1.0) / rm1,
            "aV": domain.boundary_distance(pts + pax) / rn,
        }

    senses = {"a": 1, "b": 1, "A": 1, "B": 1, "Bq": 1, "Aq": 1, "aV": -1}
    return quotients, senses


def _assemble(pool, qs, senses):
    vals, wit = {}, {}
    for name, q in qs.items():
        ext, x = _extreme(pool, q, senses[name])
        vals[name] = ext
        wit[name] = {"x": x, "quotient": ext}
    return vals, wit


def estimate_map_constants(mapspec, domain, cfg=None):
    """Estimate a_p, b_p, A_p, B_p, B_q, A_q and a_V on V_rho.

    Returns a ConstantsReport with extreme witnesses, a per-radius table at
    the configured rho fractions, and convention warnings (a violated internal
    inequality signals under-sampling, not a property of the map).
    """
    cfg = cfg or DEFAULT_CONFIG
    quotients, senses = _map_quotients(mapspec, domain)

    def one_pass(dom, rounds):
        local = dataclasses.replace(cfg, refine_rounds=rounds)
        pool = _Pool(dom, local)
        qs = _run_extremes(pool, quotients, senses, local)
        return pool, qs

    pool, qs = one_pass(domain, cfg.refine_rounds)
    vals, wit = _assemble(pool, qs, senses)

    per_rho = []
    for frac in cfg.rho_levels:
        if frac == 1.0:
            v = vals
        else:
            sub = DomainSpec(domain.kind, domain.n, domain.rho * frac,
                             domain.norm_x, domain.norm_y, domain.kappa,
                             domain.chart_margin)
            spool, sqs = one_pass(sub, 1)
            v, _ = _assemble(spool, sqs, senses)
        per_rho.append({
            "rho": domain.rho * frac,
            "a_p": -v["a"], "b_p": v["b"], "A_p": -v["A"], "B_p": v["B"],
            "B_q": -v["Bq"], "A_q": v["Aq"], "a_V": v["aV"],
        })

    report = ConstantsReport(
        N=mapspec.N, M=mapspec.M, rho=domain.rho,
        a_p=-vals["a"], b_p=vals["b"], A_p=-vals["A"], B_p=vals["B"],
        B_q=-vals["Bq"], A_q=vals["Aq"], a_V=vals["aV"],
        witnesses=wit, per_rho=per_rho, sample_size=pool.s.size,
        warnings=[], meta={"refine_rounds": cfg.refine_rounds})
    report.warnings.extend(convention_checks(report))
    return report


def convention_checks(report, tol=1e-9):
    """Internal inequalities every correctly sampled report satisfies.

    |a_p| <= b_p and a_p >= A_p/N hold pointwise for the defining quotients;
    B_q <= A_q and (for a_p > 0) B_p >= N a_p follow from the triangle
    inequality.  A violation beyond `tol` means the extremes were missed.
    """
    scale = max(abs(report.b_p), 1.0)
    out = []
    if abs(report.a_p) > report.b_p + tol * scale:
        out.append(f"|a_p| = {abs(report.a_p):.6g} exceeds b_p = {report.b_p:.6g}")
    if report.a_p < report.A_p / report.N - tol * scale:
        out.append(f"a_p = {report.a_p:.6g} below A_p/N = {report.A_p / report.N:.6g}")
    if report.B_q > report.A_q + tol * scale:
        out.append(f"B_q = {report.B_q:.6g} exceeds A_q = {report.A_q:.6g}")
    if report.a_p > 0 and report.B_p < report.N * report.a_p - tol * scale:
        out.append(f"B_p = {report.B_p:.6g} below N a_p = {report.N * report.a_p:.6g}")
    return out


# ---------------------------------------------------------------------------
# subproblem constants (one vector field pa, one matrix forcing Q)
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SubproblemConstants:
    """Constants of the pair (pa, Q) driving one transport equation.

    B is the contraction constant of Q (quotient of ||I - Q||), A_plus its
    expansion constant; A is the tangential constant of D pa and B_dpa its
    expansion twin (used only for consistency checks).  hp1 is a > 0 and hp2
    asks the time-1 displacement x + pa(x) to keep a dist >= C ||x||^N margin
    from the boundary.
    """

    N: int
    deg_Q: int
    a: float
    b: float
    A: float
    B: float
    A_plus: float
    B_dpa: float
    C: float
    witnesses: dict
    sample_size: int

    @property
    def c(self):
        return self.a if self.B <= 0 else self.b

    @property
    def d(self):
        return self.a if self.A <= 0 else self.b

    @property
    def hp1(self):
        return self.a > 0

    @property
    def hp2(self):
        return self.C > 0

    def margin(self, nu):
        return solvability_margin(nu, self.a, self.b, self.A, self.B)


def estimate_subproblem_constants(pa, Q, domain, norm_h=None, cfg=None):
    """Constants for the homogeneous transport problem D h . pa - Q h = w.

    pa: SparsePolynomial R^n -> R^n, homogeneous of some degree N >= 2.
    Q:  MatrixPoly in the same variables (entries homogeneous of one common
        degree), or None for the scalar/zero case.
    norm_h: norm on the codomain of h (defaults to the domain's y-norm).
    """
    cfg = cfg or DEFAULT_CONFIG
    norm_h = norm_h or domain.norm_y
    nx = domain.norm_x
    degs = pa.degrees()
    if len(degs) != 1:
        raise ValidationError("pa must be homogeneous")
    N = degs.pop()
    if Q is None:
        k = 1
        deg_Q = N - 1
    else:
        k = Q.rows
        qdegs = Q.degrees()
        deg_Q = qdegs.pop() if len(qdegs) == 1 else max(qdegs, default=N - 1)
    eye_n = np.eye(pa.out_dim)
    eye_k = np.eye(k)
    dpa = MatrixPoly.from_jacobian(pa, range(pa.arity))

    def quotients(pts, r):
        pax = pa.evaluate(pts)
        j = dpa.evaluate(pts)
        rn = r ** N
        rn1 = r ** (N - 1)
        rq = r ** deg_Q
        if Q is None:
            qx = np.zeros(pts.shape[:-1] + (k, k))
        else:
            qx = Q.evaluate(pts)
        return {
            "a": (nx.vec(pts + pax) - r) / rn,
            "b": nx.vec(pax) / rn,
            "A": (nx.op(eye_n + j) - 1.0) / rn1,
            "Bdpa": (nx.op(eye_n - j) - 1.0) / rn1,
            "BQ": (norm_h.op(eye_k - qx) - 1.0) / rq,
            "AQ": (norm_h.op(eye_k + qx) - 1.0) / rq,
            "C": domain.boundary_distance(pts + pax) / rn,
        }

    senses = {"a": 1, "b": 1, "A": 1, "Bdpa": 1, "BQ": 1, "AQ": 1, "C": -1}
    pool = _Pool(domain, cfg)
    qs = _run_extremes(pool, quotients, senses, cfg)
    vals, wit = _assemble(pool, qs, senses)
    return SubproblemConstants(
        N=N, deg_Q=deg_Q,
        a=-vals["a"], b=vals["b"], A=-vals["A"], B=-vals["BQ"],
        A_plus=vals["AQ"], B_dpa=vals["Bdpa"], C=vals["C"],
        witnesses=wit, sample_size=pool.s.size)


# ---------------------------------------------------------------------------
# solvability margin
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MarginReport:
    nu: int
    a: float
    b: float
    A: float
    B: float
    c: float
    d: float
    lhs: float
    rhs: float

    @property
    def margin(self):
        return self.lhs - self.rhs

    @property
    def solvable(self):
        return self.margin > 0


def solvability_margin(nu, a, b, A, B):
    """Margin of nu + 1 + B/c > max(1 - A/d, 0) with the c/d selection rule.

    Positive margin is the sufficient condition for the order-(nu+1)
    transport problem; the same function serves the x-equation by passing
    B = -B_p (expansion enters with the opposite sign).
    """
    c = a if B <= 0 else b
    d = a if A <= 0 else b
    if c <= 0 or d <= 0:
        raise BudgetUndefined(
            f"margin undefined: c = {c:.6g}, d = {d:.6g} must be positive")
    lhs = nu + 1.0 + B / c
    rhs = max(1.0 - A / d, 0.0)
    return MarginReport(nu=nu, a=a, b=b, A=A, B=B, c=c, d=d, lhs=lhs, rhs=rhs)


# ---------------------------------------------------------------------------
# hypotheses
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class OrbitReport:
    x0: np.ndarray
    points: np.ndarray
    distances: np.ndarray
    exited: bool
    exit_index: int | None


def escaping_orbit(mapspec, domain, x0, max_steps=400):
    """Iterate the x-block on the y = 0 slice until the orbit leaves V_rho.

    Records the signed boundary distance along the way; an exit certifies
    that x + p(x,0) + f(x,0) does not keep V_rho invariant.
    """
    n, m = mapspec.n, mapspec.m
    x = np.asarray(x0, dtype=float)
    pts = [x]
    for _ in range(max_steps):
        z = np.concatenate([x, np.zeros(m)])
        x = mapspec.evaluate(z)[:n]
        pts.append(x)
        if not bool(domain.member(x)):
            break
    pts = np.array(pts)
    dist = domain.boundary_distance(pts)
    inside = domain.member(pts)
    exited = not bool(inside[-1])
    exit_index = int(len(pts) - 1) if exited else None
    return OrbitReport(x0=np.asarray(x0, dtype=float), points=pts,
                       distances=dist, exited=exited, exit_index=exit_index)


@dataclasses.dataclass
class HypothesesReport:
    constants: ConstantsReport
    verdicts: dict
    details: dict
    orbits: list

    @property
    def ok(self):
        return all(self.verdicts.values())

    @property
    def failed(self):
        return [k for k, v in self.verdicts.items() if not v]

    def raise_if_failed(self, force=False):
        if self.ok or force:
            return self
        name = self.failed[0]
        raise HypothesisFailure(
            f"{name} fails: {self.details[name]}",
            hypothesis=name,
            witnesses={k: self.constants.witnesses.get(k) for k in ("a", "aV")})


def _section_invertibility(mapspec, domain, cfg):
    """min over unit directions of the smallest singular value of D_y q(x,0)."""
    chart = domain.section_chart()
    s, _ = _section_params(chart, cfg)
    u = chart.direction(s)
    mats = mapspec.Dyq0().evaluate(u)
    sv = np.linalg.svd(mats, compute_uv=False)
    return float(sv[..., -1].min()), float(sv[..., 0].max())


def check_hypotheses(mapspec, domain, cfg=None, report=None):
    """H1 (decay), H2 (fibre solvability) and H3 (forward invariance).

    H2 takes the route matching the degree balance: for M < N the fibre block
    must be algebraically invertible on the section; for M = N it is the
    quotient inequality 2 + B_q/c_p > max(1 - A_p/d_p, 0); for M > N there is
    nothing to check at leading order.
    """
    cfg = cfg or DEFAULT_CONFIG
    if report is None:
        report = estimate_map_constants(mapspec, domain, cfg)
    N, M = report.N, report.M
    verdicts, details, orbits = {}, {}, []

    h1 = report.a_p > 0
    det = f"a_p = {report.a_p:.6g}"
    if M > N and h1:
        ratio = report.A_p / report.d_p
        h1 = ratio > -1.0
        det += f", A_p/d_p = {ratio:.6g} (needs > -1)"
    verdicts["H1"] = bool(h1)
    details["H1"] = det

    if M < N:
        smin, smax = _section_invertibility(mapspec, domain, cfg)
        ok = smin > 1e-12 * max(smax, 1.0)
        verdicts["H2"] = bool(ok)
        details["H2"] = (f"D_y q(x,0) on the unit section: "
                         f"min singular value {smin:.6g}")
    elif M == N:
        try:
            lhs = 2.0 + report.B_q / report.c_p
            rhs = max(1.0 - report.A_p / report.d_p, 0.0)
            verdicts["H2"] = bool(lhs > rhs)
            details["H2"] = f"2 + B_q/c_p = {lhs:.6g} vs max(1 - A_p/d_p, 0) = {rhs:.6g}"
        except ZeroDivisionError:
            verdicts["H2"] = False
            details["H2"] = "c_p or d_p vanished"
    else:
        verdicts["H2"] = True
        details["H2"] = "M > N: no leading-order fibre condition"

    h3 = report.a_V > 0
    verdicts["H3"] = bool(h3)
    details["H3"] = f"a_V = {report.a_V:.6g}"
    if not h3:
        wit = report.witnesses["aV"]["x"]
        orbits.append(escaping_orbit(mapspec, domain, wit))
        chart = domain.section_chart()
        if chart.kind != "point":
            mid = chart.direction(np.array([chart.lo + 0.75 * chart.span]))[0]
            orbits.append(escaping_orbit(mapspec, domain, mid * domain.rho / 2))
        details["H3"] += f"; witness x = {np.array2string(wit, precision=6)}"

    return HypothesesReport(constants=report, verdicts=verdicts,
                            details=details, orbits=orbits)


# ---------------------------------------------------------------------------
# regularity budget
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RegularityBudget:
    case: str                 # 'analytic' | 'smooth' | 'finite'
    gamma: int | None         # finite case only
    ell_f: int | None
    rate: float | None
    bound: float | None
    boundary_flag: bool
    notes: list

    def describe(self):
        if self.case == "finite":
            head = f"C^{self.gamma} regularity budget"
        elif self.case == "smooth":
            head = "C-infinity regularity budget"
        else:
            head = "analytic regularity budget"
        return head + (f", ell_f = {self.ell_f}" if self.ell_f is not None else "")


_SMOOTH_RTOL = 1e-6
_ELLF_DEFLATION = 0.99
_GAMMA_SHRINK = 1.0 - 1e-6


def regularity_budget(report, ell=None):
    """Regularity class of the invariant graph and the usable order ell_f.

    The finite case uses gamma = max { k >= 1 : k (1 - A_p/d_p) < bound } with
    bound = 2 + B_q/c_p when M = N and bound = 2 when M > N; the bound is
    shrunk by 1e-6 relatively so an exact integer ratio resolves to the lower
    (safe) class.  ell_f applies a 1 percent deflation to B_p/a_p and flags
    results whose floor is sensitive to it.
    """
    N, M = report.N, report.M
    notes = []
    if report.a_p <= 0:
        raise BudgetUndefined(f"a_p = {report.a_p:.6g} <= 0: no decay, no budget")

    if M < N:
        notes.append("M < N: fibre corrections are algebraic, graph analytic in scale")
        return RegularityBudget("analytic", None, ell, None, None, False, notes)

    d = report.d_p
    if d <= 0:
        raise BudgetUndefined(f"d_p = {d:.6g} <= 0")
    rel = (report.A_p - d) / abs(d)
    ratio = report.B_p / report.a_p
    deflated = _ELLF_DEFLATION * ratio

    if rel > _SMOOTH_RTOL:
        case, gamma, rate, bound = "analytic", None, None, None
    elif rel >= -_SMOOTH_RTOL:
        case, gamma, rate, bound = "smooth", None, None, None
        notes.append("A_p = d_p within tolerance: formally C-infinity, not analytic")
    else:
        rate = 1.0 - report.A_p / d
        bound = 2.0 + report.B_q / report.c_p if M == N else 2.0
        if bound <= 0:
            raise BudgetUndefined(f"regularity bound {bound:.6g} <= 0")
        shrunk = bound * _GAMMA_SHRINK
        gamma = int(np.floor(shrunk / rate))
        if gamma * rate >= shrunk:
            gamma -= 1
        if gamma < 1:
            raise BudgetUndefined(
                f"no k >= 1 with k * {rate:.6g} < {bound:.6g}: graph below C^1 budget")
        case = "finite"

    if case == "finite":
        inner = deflated + gamma * rate
        raw = ratio + gamma * rate
    else:
        inner = deflated
        raw = ratio
    ell_f = N - 1 + int(np.floor(inner))
    flag = int(np.floor(inner)) != int(np.floor(raw))
    if flag:
        notes.append(
            f"B_p/a_p contribution {raw:.6g} is within 1 percent of an integer "
            f"boundary; ell_f = {ell_f} uses the deflated value")
    return RegularityBudget(case, gamma, ell_f, rate, bound, flag, notes)
