"""Transport-equation solvers: oracles, envelopes, divergence classification.

The closed forms used here are derived independently of the solver:

* 1-D, pa = -x^N, Q = 0, w = x^{nu+N}:  h = -x^{nu+1} / (nu+1).
* Sector problem pa = (-x1^2, -a x1 x2), Q = [b x1], w = x2^3:
  the flow is phi = (x1/(1+t x1), x2 (1+t x1)^{-a}) and M = (1+t x1)^b,
  so the integrand decays like t^{-(b+3a)}; for b + 3a > 1 the quadrature
  converges to h = x2^3 / (1 - 3a - b), for b + 3a <= 1 it diverges.
* Ball problem pa = (-x1^3, -x2^3), Q = [2|x|^2], w = x1^2 x2^2:
  M^{-1} = [(1+2x1^2 t)(1+2x2^2 t)]^{-1} and the integral evaluates to
  h = -x1^2 x2^2 [ (al+be) - 2 al be log(be/al)/(be-al) ] / (be-al)^2
  with al = 2 x1^2, be = 2 x2^2 (limit -x2^2/6 on the diagonal).
* Radial pair pa = -|x|^2 x, Q = [[d r^2, 0], [e x1 x2, d r^2]],
  w = (x1^4, x1^2 x2^2):  the degree-2 pencil gives
  h1 = -x1^4 / (2.5 r^2),  h2 = -x1^2 x2^2 / (2.5 r^2) + 0.3 x1^5 x2 / (6.25 r^4)
  for d = 0.5, e = 0.3.
"""

import math

import numpy as np
import pytest

from paraman.cohomology import (
    CohomologicalProblem, decay_envelope, derivative_of_solution,
    integrate_flow, solve_algebraic, solve_general, solve_radial,
)
from paraman.errors import (
    DivergentCohomologicalIntegral, LeftDomain, NonIntegrableTail, NotRadial,
    OutOfDomain, SingularAt, SingularPencil, ValidationError,
)
from paraman.graded import CrossSectionGrid, HomogeneousTerm, eval_term, materialize
from paraman.model import DomainSpec, MatrixPoly, Norm, RunOptions, SparsePolynomial

A_COEF = 0.2  # sector problem tilt; kappa = 1 - a


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ray():
    return DomainSpec("ray", 1, 0.5, Norm("max"))


@pytest.fixture(scope="module")
def sector():
    return DomainSpec("sector-cone", 2, 0.2, Norm("max"), Norm("max"),
                      kappa=1 - A_COEF)


@pytest.fixture(scope="module")
def ball():
    return DomainSpec("punctured-ball", 2, 0.5, Norm("euclid"), Norm("max"))


def _sector_problem(domain, b):
    pa = SparsePolynomial(2, [{(2, 0): -1.0}, {(1, 1): -A_COEF}])
    Q = MatrixPoly([[SparsePolynomial(2, [{(1, 0): b}])]])
    w = SparsePolynomial(2, [{(0, 3): 1.0}])
    return CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=domain)


@pytest.fixture(scope="module")
def sector_conv(sector):
    return _sector_problem(sector, 0.6)   # kappa = b + 3a = 1.2


@pytest.fixture(scope="module")
def sector_div(sector):
    return _sector_problem(sector, 0.3)   # kappa = 0.9


@pytest.fixture(scope="module")
def ball_fibre(ball):
    pa = SparsePolynomial(2, [{(3, 0): -1.0}, {(0, 3): -1.0}])
    Q = MatrixPoly([[SparsePolynomial(2, [{(2, 0): 2.0, (0, 2): 2.0}])]])
    w = SparsePolynomial(2, [{(2, 2): 1.0}])
    return CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=ball)


@pytest.fixture(scope="module")
def ball_fibre_solved(ball_fibre):
    return solve_general(ball_fibre)


@pytest.fixture(scope="module")
def radial_pair(ball):
    pa = SparsePolynomial(2, [{(3, 0): -1.0, (1, 2): -1.0},
                              {(2, 1): -1.0, (0, 3): -1.0}])
    dq = SparsePolynomial(2, [{(2, 0): 0.5, (0, 2): 0.5}])
    eq = SparsePolynomial(2, [{(1, 1): 0.3}])
    zero = SparsePolynomial.zero(2, 1)
    Q = MatrixPoly([[dq, zero], [eq, dq]])
    w = SparsePolynomial(2, [{(4, 0): 1.0}, {(2, 2): 1.0}])
    return CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=ball)


def _ball_oracle(x1, x2):
    al, be = 2.0 * x1 ** 2, 2.0 * x2 ** 2
    d = be - al
    with np.errstate(divide="ignore", invalid="ignore"):
        I = (al + be - 2 * al * be * np.log(be / al) / d) / d ** 2
    diag = np.abs(d) < 1e-12 * (al + be)
    I = np.where(diag, 1.0 / (3 * np.maximum(al, 1e-300)), I)
    return -(x1 ** 2) * x2 ** 2 * I


# ---------------------------------------------------------------------------
# radial closed forms
# ---------------------------------------------------------------------------


def test_radial_one_dim_oracle(ray):
    pa = SparsePolynomial(1, [{(2,): -1.0}])
    for nu in (1, 2, 3):
        w = SparsePolynomial(1, [{(nu + 2,): 1.0}])
        prob = CohomologicalProblem(pa=pa, Q=None, w=w, nu=nu, domain=ray)
        res = solve_radial(prob)
        x = np.array([[0.3], [0.12], [0.01]])
        want = -x ** (nu + 1) / (nu + 1)
        assert np.abs(res.at(x) - want).max() < 1e-15
        assert res.diagnostics["pde_residual"] < 1e-12


def test_radial_pair_closed_form(radial_pair):
    res = solve_radial(radial_pair)
    th = np.linspace(0.2, 2 * np.pi - 0.2, 11)
    pts = 0.3 * np.stack([np.cos(th), np.sin(th)], axis=1)
    x1, x2 = pts[:, 0], pts[:, 1]
    r2 = x1 ** 2 + x2 ** 2
    want = np.stack([
        -x1 ** 4 / (2.5 * r2),
        -x1 ** 2 * x2 ** 2 / (2.5 * r2) + 0.3 * x1 ** 5 * x2 / (6.25 * r2 ** 2),
    ], axis=1)
    got = res.at(pts)
    assert np.abs(got - want).max() < 1e-14
    assert res.diagnostics["pde_residual"] < 1e-12
    assert res.term.kind == "closed-form"


def test_radial_exact_jacobian(radial_pair):
    res = solve_radial(radial_pair)
    pts = np.array([[0.21, 0.08], [0.1, -0.17]])
    J = derivative_of_solution(res, pts)
    # central differences on the closed form
    h = 1e-6
    for c in range(2):
        dp = np.zeros(2)
        dp[c] = h
        fd = (res.at(pts + dp) - res.at(pts - dp)) / (2 * h)
        assert np.abs(J[:, :, c] - fd).max() < 1e-8


def test_not_radial_different_scalars(sector_conv):
    with pytest.raises(NotRadial):
        solve_radial(sector_conv)


def test_not_radial_missing_variable(ray):
    # a 2-D field whose first component has a monomial without x1
    dom = DomainSpec("punctured-ball", 2, 0.5, Norm("euclid"))
    pa = SparsePolynomial(2, [{(0, 3): -1.0}, {(0, 3): -1.0}])
    w = SparsePolynomial(2, [{(4, 0): 1.0}, {(2, 2): 1.0}])
    prob = CohomologicalProblem(pa=pa, Q=None, w=w, nu=1, domain=dom)
    with pytest.raises(NotRadial):
        solve_radial(prob)


def test_singular_pencil(ball):
    # Q picked so that (nu+1) p0 I - Q has an identically-zero eigenvalue
    pa = SparsePolynomial(2, [{(3, 0): -1.0, (1, 2): -1.0},
                              {(2, 1): -1.0, (0, 3): -1.0}])
    minus2r2 = SparsePolynomial(2, [{(2, 0): -2.0, (0, 2): -2.0}])
    zero = SparsePolynomial.zero(2, 1)
    Q = MatrixPoly([[minus2r2, zero], [zero, zero]])
    w = SparsePolynomial(2, [{(4, 0): 1.0}, {(2, 2): 1.0}])
    prob = CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=ball)
    with pytest.raises(SingularPencil):
        solve_radial(prob)


# ---------------------------------------------------------------------------
# flow integration against closed forms
# ---------------------------------------------------------------------------


def test_flow_closed_form(sector_conv):
    x0 = np.array([0.1, 0.05])
    traj = integrate_flow(sector_conv, x0, 100.0, t_eval=[1.0, 10.0, 100.0],
                          strict=False)
    for t in (1.0, 10.0, 100.0):
        s = traj.state(t)
        u = 1 + t * x0[0]
        phi = np.array([x0[0] / u, x0[1] * u ** (-A_COEF)])
        assert np.abs(s.x - phi).max() < 1e-9
        assert abs(s.Minv[0, 0] - u ** (-0.6)) < 1e-9


def test_flow_variational_closed_form(sector_conv):
    x0 = np.array([0.08, 0.03])
    traj = integrate_flow(sector_conv, x0, 10.0, t_eval=[10.0],
                          with_variational=True, strict=False)
    s = traj.state(10.0)
    u = 1 + s.t * x0[0]
    want = np.array([
        [u ** -2, 0.0],
        [-A_COEF * s.t * x0[1] * u ** (-A_COEF - 1), u ** (-A_COEF)],
    ])
    assert np.abs(s.Dphi - want).max() < 1e-9


def test_flow_scaling_identity(sector_conv):
    # phi(t, lam x) = lam phi(lam^{N-1} t, x); M(t, lam x) = M(lam^{N-1} t, x)
    x0 = np.array([0.1, 0.05])
    for lam in (0.5, 0.25):
        t1 = integrate_flow(sector_conv, lam * x0, 40.0, t_eval=[40.0],
                            strict=False)
        t2 = integrate_flow(sector_conv, x0, lam * 40.0, t_eval=[lam * 40.0],
                            strict=False)
        assert np.abs(t1.states[-1].x - lam * t2.states[-1].x).max() < 1e-8
        assert np.abs(t1.states[-1].Minv - t2.states[-1].Minv).max() < 1e-8


def test_flow_strict_raises_on_exit(sector_conv):
    # off-axis starting points eventually violate the sector condition
    x0 = np.array([0.1, 0.05])
    with pytest.raises(LeftDomain) as err:
        integrate_flow(sector_conv, x0, 100.0)
    assert err.value.t_exit is not None and err.value.t_exit > 1.0
    assert np.allclose(err.value.x0, x0)


def test_flow_nonstrict_records_exit(sector_conv):
    x0 = np.array([0.1, 0.05])
    traj = integrate_flow(sector_conv, x0, 100.0, strict=False)
    # ratio |phi2|/phi1 grows like (1+t x1)^{0.8}; exit near t ~ 8
    assert 5.0 < traj.left_domain_t < 12.0


def test_flow_axis_stays_inside(sector_conv):
    traj = integrate_flow(sector_conv, np.array([0.1, 0.0]), 1000.0)
    assert traj.left_domain_t is None
    assert traj.states[-1].x[0] < 0.001


def test_flow_rejects_outside_start(sector_conv):
    with pytest.raises(OutOfDomain):
        integrate_flow(sector_conv, np.array([0.1, 0.095]), 1.0)


def test_trajectory_state_lookup(sector_conv):
    traj = integrate_flow(sector_conv, np.array([0.1, 0.0]), 10.0,
                          t_eval=[1.0, 10.0])
    assert traj.state(1.0).t == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValidationError):
        traj.state(3.0)


# ---------------------------------------------------------------------------
# decay envelopes
# ---------------------------------------------------------------------------


def test_envelope_divergent_raises(sector_div):
    with pytest.raises(NonIntegrableTail) as err:
        decay_envelope(sector_div)
    assert err.value.kappa == pytest.approx(0.9, abs=0.02)


def test_envelope_measured_exponent(sector_conv):
    env = decay_envelope(sector_conv)
    # invariance fails on the sector, so the operative exponent is measured
    assert not env.formula_valid
    assert env.kappa == pytest.approx(1.2, abs=0.02)
    assert env.kappa_measured == pytest.approx(1.2, abs=0.02)
    assert env.kappa_formula == pytest.approx(3.6, abs=0.05)


def test_envelope_formula_mode(ball_fibre):
    env = decay_envelope(ball_fibre)
    assert env.formula_valid
    assert env.kappa_measured is None
    # alpha (nu + N + B/c) = (1/2)(1 + 3 + 2) = 3
    assert env.kappa == pytest.approx(3.0, abs=1e-6)
    # M^{-1} decays: fast clock; M grows: slow clock
    assert env.c == pytest.approx(1.0, abs=1e-6)
    assert env.delta == pytest.approx(0.5, abs=1e-6)
    # on the diagonal M(t) = (1 + t r^2)^2 meets the bound exactly
    for t in (1.0, 1e2, 1e4):
        assert env.m_bound(t, 0.3) == pytest.approx((1 + t * 0.09) ** 2, rel=1e-9)


def test_envelope_zero_q_always_integrable(ray):
    pa = SparsePolynomial(1, [{(3,): -1.0}])
    for nu in (0, 1, 4):
        w = SparsePolynomial(1, [{(nu + 3,): 1.0}])
        prob = CohomologicalProblem(pa=pa, Q=None, w=w, nu=nu, domain=ray)
        env = decay_envelope(prob)
        assert env.kappa == pytest.approx((nu + 3) / 2.0, rel=1e-9)
        assert env.kappa > 1


def test_envelope_tail_closed_form(ball_fibre):
    env = decay_envelope(ball_fibre)
    from scipy.integrate import quad
    for T in (10.0, 1e3):
        want, _ = quad(lambda t: env.C0 * (1 + env.clock(1.0) * t) ** -env.kappa,
                       T, np.inf)
        assert env.tail(T) == pytest.approx(want, rel=1e-9)


def test_envelope_brackets_sector_while_inside(sector_conv):
    """Radius and matrix envelopes hold along every in-domain flow segment.

    The brackets are stated for trajectories inside the sector; this
    problem's orbits eventually leave it, so (t, x) samples are kept only
    while the trajectory is still inside.  3% slack on the constants.
    """
    env = decay_envelope(sector_conv, measure=False, strict=False)
    rng = np.random.default_rng(7)
    ts = np.array([0.3, 1.0, 3.0, 10.0, 30.0, 100.0])
    checked = 0
    for _ in range(55):
        x0 = np.array([rng.uniform(0.03, 0.18), 0.0])
        x0[1] = rng.uniform(-0.7, 0.7) * (1 - A_COEF) * x0[0]
        traj = integrate_flow(sector_conv, x0, ts[-1], t_eval=ts, strict=False)
        r0 = float(np.abs(x0).max())
        for s in traj.states:
            if traj.left_domain_t is not None and s.t >= traj.left_domain_t:
                continue
            lo, hi = env.radius_bracket(s.t, r0)
            rn = float(np.abs(s.x).max())
            assert 0.97 * lo <= rn <= 1.03 * hi
            assert abs(s.Minv[0, 0]) <= 1.03 * env.minv_bound(s.t, r0)
            assert abs(s.M[0, 0]) <= 1.03 * env.m_bound(s.t, r0)
            checked += 1
    assert checked >= 200


def test_envelope_brackets_ball_all_times(ball_fibre):
    # the ball domain is invariant, so the brackets hold for every t
    env = decay_envelope(ball_fibre)
    rng = np.random.default_rng(11)
    ts = np.array([0.5, 2.0, 10.0, 1e2, 1e3, 1e4])
    checked = 0
    for _ in range(34):
        th = rng.uniform(0, 2 * np.pi)
        r0 = rng.uniform(0.05, 0.45)
        x0 = r0 * np.array([np.cos(th), np.sin(th)])
        traj = integrate_flow(ball_fibre, x0, ts[-1], t_eval=ts)
        assert traj.left_domain_t is None
        for s in traj.states:
            lo, hi = env.radius_bracket(s.t, r0)
            rn = float(np.hypot(*s.x))
            assert 0.97 * lo <= rn <= 1.03 * hi
            assert abs(s.Minv[0, 0]) <= 1.03 * env.minv_bound(s.t, r0)
            assert abs(s.M[0, 0]) <= 1.03 * env.m_bound(s.t, r0)
            checked += 1
    assert checked >= 200


# ---------------------------------------------------------------------------
# quadrature solves
# ---------------------------------------------------------------------------


def test_general_matches_radial_one_dim(ray):
    pa = SparsePolynomial(1, [{(2,): -1.0}])
    w = SparsePolynomial(1, [{(3,): 1.0}])
    prob = CohomologicalProblem(pa=pa, Q=None, w=w, nu=1, domain=ray)
    res = solve_general(prob)
    x = np.array([[0.3], [0.07]])
    assert np.abs(res.at(x) + x ** 2 / 2).max() < 1e-10
    assert res.diagnostics["kappa_hat"] == pytest.approx(3.0, abs=0.05)
    assert res.diagnostics["converged"]


def test_general_matches_radial_pair(radial_pair):
    rad = solve_radial(radial_pair)
    gen = solve_general(radial_pair)
    th = np.linspace(0.1, 2 * np.pi - 0.1, 17)
    pts = 0.25 * np.stack([np.cos(th), np.sin(th)], axis=1)
    assert np.abs(gen.at(pts) - rad.at(pts)).max() < 1e-8
    J_r = derivative_of_solution(rad, pts)
    J_g = derivative_of_solution(gen, pts)
    assert np.abs(J_r - J_g).max() < 1e-6


def test_sector_convergent_oracle(sector_conv):
    opts = RunOptions(nodes=33)
    res = solve_general(sector_conv, opts=opts, force=True)
    rng = np.random.default_rng(3)
    x1 = rng.uniform(0.05, 0.18, 20)
    x2 = rng.uniform(-0.7, 0.7, 20) * (1 - A_COEF) * x1
    pts = np.stack([x1, x2], axis=1)
    want = -5.0 * x2 ** 3 / x1    # x2^3 / (x1 (1 - 3a - b)) at a=0.2, b=0.6
    got = res.at(pts)[:, 0]
    scale = np.abs(want).max()
    assert np.abs(got - want).max() < 1e-8 * max(scale, 1.0)
    assert res.diagnostics["kappa_hat"] == pytest.approx(1.2, abs=0.02)
    # nearly every node's trajectory leaves the sector; that is recorded
    assert len(res.diagnostics["exits"]) > 25


def test_sector_divergent_classified(sector_div):
    with pytest.raises(DivergentCohomologicalIntegral) as err:
        solve_general(sector_div, opts=RunOptions(nodes=17), force=True)
    assert err.value.degree == 2
    assert err.value.kappa_hat == pytest.approx(0.9, abs=0.03)
    assert err.value.diagnostics["reason"] == "slow tail"


def test_log_marginal_divergence(ray):
    # M^{-1} = (1+tx)^2 against w(phi) = x^3 (1+tx)^{-3}: integrand ~ 1/t
    pa = SparsePolynomial(1, [{(2,): -1.0}])
    Q = MatrixPoly([[SparsePolynomial(1, [{(1,): -2.0}])]])
    w = SparsePolynomial(1, [{(3,): 1.0}])
    prob = CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=ray)
    with pytest.raises(DivergentCohomologicalIntegral) as err:
        solve_general(prob, force=True)
    assert err.value.kappa_hat == pytest.approx(1.0, abs=0.02)


def test_certificate_required_without_force(sector_div):
    # the gate refuses before any quadrature when kappa <= 1
    with pytest.raises(DivergentCohomologicalIntegral) as err:
        solve_general(sector_div)
    assert "certificate" in str(err.value)


def test_exits_forbidden_without_force(sector_conv):
    # sector orbits leave the cone; without force= that is an error, not data
    with pytest.raises(LeftDomain):
        solve_general(sector_conv, opts=RunOptions(nodes=17))


def test_zero_forcing_short_circuit(ball_fibre):
    prob = CohomologicalProblem(pa=ball_fibre.pa, Q=ball_fibre.Q,
                                w=SparsePolynomial.zero(2, 1), nu=1,
                                domain=ball_fibre.domain)
    # a structurally-zero forcing must short-circuit to the zero term
    res = solve_general(prob)
    assert res.term.is_zero()
    pts = np.array([[0.1, 0.2], [0.0, 0.0]])
    assert np.all(res.at(pts) == 0)
    assert np.all(derivative_of_solution(res, pts) == 0)
    assert res.diagnostics["pde_residual"] == 0.0


def test_ball_fibre_oracle(ball_fibre_solved):
    res = ball_fibre_solved
    th = np.linspace(0.15, np.pi / 2 - 0.15, 9)
    pts = 0.3 * np.stack([np.cos(th), np.sin(th)], axis=1)
    want = _ball_oracle(pts[:, 0], pts[:, 1])
    got = res.at(pts)[:, 0]
    assert np.abs(got - want).max() < 1e-6 * np.abs(want).max()
    # removable singularity on the diagonal: h -> -x2^2/6
    c = 0.2 / math.sqrt(2)
    assert res.at(np.array([c, c]))[0] == pytest.approx(-c ** 2 / 6, rel=1e-9)
    assert res.diagnostics["converged"]
    assert res.diagnostics["pde_residual"] < 1e-8


def test_ball_fibre_spline_error_bar(ball_fibre_solved):
    # the section interpolant must carry an honest bound
    res = ball_fibre_solved
    th = np.linspace(0.01, 2 * np.pi - 0.01, 113)
    pts = np.stack([np.cos(th), np.sin(th)], axis=1)
    want = _ball_oracle(pts[:, 0], pts[:, 1])
    spline = eval_term(res.term, pts)[:, 0]
    assert np.abs(spline - want).max() <= 3.0 * res.term.error_bound + 1e-12


def test_derivative_vs_finite_differences(ball_fibre_solved):
    res = ball_fibre_solved
    pts = np.array([[0.22, 0.13], [0.09, -0.2]])
    J = derivative_of_solution(res, pts)
    h = 1e-6
    for c in range(2):
        dp = np.zeros(2)
        dp[c] = h
        fd = ((_ball_oracle((pts + dp)[:, 0], (pts + dp)[:, 1])
               - _ball_oracle((pts - dp)[:, 0], (pts - dp)[:, 1])) / (2 * h))
        assert np.abs(J[:, 0, c] - fd).max() < 1e-5 * np.abs(fd).max()


def test_quadrature_euler_identity(ball_fibre_solved):
    # homogeneity: Dh(u) . u = (nu+1) h(u)
    assert ball_fibre_solved.diagnostics["euler_gap"] < 1e-9


def test_solution_unique_across_grids(ball_fibre):
    a = solve_general(ball_fibre, opts=RunOptions(nodes=65))
    b = solve_general(ball_fibre, opts=RunOptions(nodes=97))
    th = np.linspace(0.05, 2 * np.pi - 0.05, 23)
    pts = 0.2 * np.stack([np.cos(th), np.sin(th)], axis=1)
    gap = np.abs(a.at(pts) - b.at(pts)).max()
    assert gap < 1e-10
    # and the two splines agree within their stated error bars
    spl = np.abs(eval_term(a.term, pts) - eval_term(b.term, pts)).max()
    assert spl <= a.term.error_bound + b.term.error_bound


def test_pde_residual_recorded_everywhere(ball_fibre_solved, radial_pair):
    for res in (ball_fibre_solved, solve_radial(radial_pair),
                solve_general(radial_pair)):
        assert res.diagnostics["pde_residual"] < 1e-5


def test_left_domain_interpolant_forcing(sector):
    """Non-polynomial section data cannot follow the flow out of the chart."""
    def f(pts):
        x = np.asarray(pts)
        return (x[..., 1] ** 3 * (x[..., 0] ** 2 - 0.3 * x[..., 1] ** 2)
                / np.maximum(x[..., 0] ** 2 + x[..., 1] ** 2, 1e-300))[..., None]

    grid = CrossSectionGrid(sector, 65)
    lazy = HomogeneousTerm(3, 2, 1, "lazy", f)
    w = materialize(lazy, grid)
    pa = SparsePolynomial(2, [{(2, 0): -1.0}, {(1, 1): -A_COEF}])
    Q = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 0.6}])]])
    prob = CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=sector)
    with pytest.raises(LeftDomain):
        solve_general(prob, opts=RunOptions(nodes=17), force=True)


# ---------------------------------------------------------------------------
# algebraic solve
# ---------------------------------------------------------------------------


def test_algebraic_oracle(sector):
    Qy = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 0.5}])]])
    E = SparsePolynomial(2, [{(2, 1): 1.0}])
    res = solve_algebraic(Qy, E, sector)
    pts = np.array([[0.1, 0.05], [0.15, -0.08]])
    want = -(pts[:, 0] ** 2 * pts[:, 1]) / (0.5 * pts[:, 0])
    assert np.abs(res.at(pts)[:, 0] - want).max() < 1e-14
    assert res.term.degree == 2
    assert res.diagnostics["pde_residual"] < 1e-12


def test_algebraic_exact_jacobian(sector):
    Qy = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 0.5}])]])
    E = SparsePolynomial(2, [{(2, 1): 1.0}])
    res = solve_algebraic(Qy, E, sector)
    pts = np.array([[0.12, 0.04]])
    J = derivative_of_solution(res, pts)
    # h = -2 x1 x2 exactly
    assert np.abs(J[0, 0] - np.array([-2 * 0.04, -2 * 0.12])).max() < 1e-14


def test_algebraic_singular_direction(ball):
    # Qy vanishes on the x2 axis, which the circle chart passes through
    Qy = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 1.0}])]])
    E = SparsePolynomial(2, [{(2, 1): 1.0}])
    with pytest.raises(SingularAt) as err:
        solve_algebraic(Qy, E, ball)
    assert err.value.x is not None


def test_algebraic_degree_validation(sector):
    Qy = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 0.5}])]])
    with pytest.raises(ValidationError):
        solve_algebraic(Qy, SparsePolynomial(2, [{(1, 0): 1.0}]), sector)


# ---------------------------------------------------------------------------
# problem validation
# ---------------------------------------------------------------------------


def test_problem_rejects_degree_mismatch(sector):
    pa = SparsePolynomial(2, [{(2, 0): -1.0}, {(1, 1): -A_COEF}])
    w = SparsePolynomial(2, [{(0, 3): 1.0}])
    with pytest.raises(ValidationError):
        CohomologicalProblem(pa=pa, Q=None, w=w, nu=2, domain=sector)


def test_problem_rejects_inhomogeneous_pa(sector):
    pa = SparsePolynomial(2, [{(2, 0): -1.0, (3, 0): 1.0}, {(1, 1): -1.0}])
    w = SparsePolynomial(2, [{(0, 3): 1.0}])
    with pytest.raises(ValidationError):
        CohomologicalProblem(pa=pa, Q=None, w=w, nu=1, domain=sector)


def test_problem_rejects_bad_q_shape(sector):
    pa = SparsePolynomial(2, [{(2, 0): -1.0}, {(1, 1): -A_COEF}])
    Q = MatrixPoly([[SparsePolynomial(2, [{(1, 0): 1.0}]),
                     SparsePolynomial(2, [{(1, 0): 1.0}])]])
    w = SparsePolynomial(2, [{(0, 3): 1.0}])
    with pytest.raises(ValidationError):
        CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=sector)


def test_problem_drops_zero_q(sector):
    pa = SparsePolynomial(2, [{(2, 0): -1.0}, {(1, 1): -A_COEF}])
    Q = MatrixPoly([[SparsePolynomial.zero(2, 1)]])
    w = SparsePolynomial(2, [{(0, 3): 1.0}])
    prob = CohomologicalProblem(pa=pa, Q=Q, w=w, nu=1, domain=sector)
    assert prob.Q is None
