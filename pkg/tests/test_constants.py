"""Quotient constants, hypothesis checks and regularity budgets on the
built-in problems, where every extreme value is known in closed form."""

import numpy as np
import pytest

from paraman import constants as C
from paraman.errors import BudgetUndefined, EmptyDomainSample, HypothesisFailure
from paraman.examples import example
from paraman.model import DomainSpec, MapSpec, Norm, SparsePolynomial


def _report(**kw):
    base = dict(N=2, M=2, rho=0.5, a_p=1.0, b_p=1.0, A_p=0.0, B_p=2.0,
                B_q=0.5, A_q=0.5, a_V=0.5, witnesses={}, per_rho=[],
                sample_size=0, warnings=[], meta={})
    base.update(kw)
    return C.ConstantsReport(**base)


@pytest.fixture(scope="module")
def ex4_rep():
    doc = example("ex4")
    return C.estimate_map_constants(doc.spec, doc.domain)


@pytest.fixture(scope="module")
def ex2_doc():
    return example("ex2-divergent")


@pytest.fixture(scope="module")
def ex2_rep(ex2_doc):
    return C.estimate_map_constants(ex2_doc.spec, ex2_doc.domain)


@pytest.fixture(scope="module")
def ex3_doc():
    return example("ex3")


@pytest.fixture(scope="module")
def ex3_rep(ex3_doc):
    return C.estimate_map_constants(ex3_doc.spec, ex3_doc.domain)


# ---------------------------------------------------------------------------
# ex4: all four x-constants exact (1, 0, 2, 4) on the kappa = 1 cone
# ---------------------------------------------------------------------------

def test_ex4_decay_floor_exact(ex4_rep):
    # ||x + p(x,0)|| = x1 (1 - x1) everywhere on the cone
    assert abs(ex4_rep.a_p - 1.0) < 1e-9


def test_ex4_tangential_constants(ex4_rep):
    assert abs(ex4_rep.A_p) < 1e-5
    assert abs(ex4_rep.b_p - 2.0) < 1e-5
    assert abs(ex4_rep.B_p - 4.0) < 1e-5


def test_ex4_fibre_constants(ex4_rep):
    assert abs(ex4_rep.B_q - 1.0) < 1e-9
    assert ex4_rep.A_q >= ex4_rep.B_q - 1e-12


def test_ex4_forward_invariance_margin(ex4_rep):
    assert 0.45 < ex4_rep.a_V < 0.51


def test_ex4_no_convention_warnings(ex4_rep):
    assert ex4_rep.warnings == []


def test_ex4_hypotheses_all_pass(ex4_rep):
    doc = example("ex4")
    hyp = C.check_hypotheses(doc.spec, doc.domain, report=ex4_rep)
    assert hyp.ok
    assert hyp.orbits == []
    assert "M > N" in hyp.details["H2"]


def test_ex4_budget(ex4_rep):
    bud = C.regularity_budget(ex4_rep)
    assert bud.case == "finite"
    assert bud.gamma == 1
    assert abs(bud.bound - 2.0) < 1e-9
    assert bud.ell_f == 5


# ---------------------------------------------------------------------------
# ex2 on the cone |x2| < 0.8 x1, rho = 0.2: a_p = 1, A_p = a^2, B_q = b
# ---------------------------------------------------------------------------

def test_ex2_claimed_constants(ex2_rep):
    assert abs(ex2_rep.a_p - 1.0) < 1e-9
    assert abs(ex2_rep.A_p - 0.04) < 1e-6
    assert abs(ex2_rep.B_q - 0.3) < 1e-9


def test_ex2_secondary_constants(ex2_rep):
    assert abs(ex2_rep.b_p - 1.0) < 1e-9
    assert abs(ex2_rep.B_p - 2.0) < 1e-9
    # B_q > 0 selects the ceiling constant
    assert ex2_rep.c_p == ex2_rep.b_p


def test_ex2_invariance_fails(ex2_rep):
    # the image loses a 0.64 x1^2 face margin, divided by the covector
    # length 1.8: the infimum quotient is exactly -16/45
    assert abs(ex2_rep.a_V + 16.0 / 45.0) < 1e-5
    assert ex2_rep.witnesses["aV"]["quotient"] == ex2_rep.a_V


def test_ex2_per_rho_table(ex2_rep):
    assert [row["rho"] for row in ex2_rep.per_rho] == pytest.approx(
        [0.2, 0.1, 0.05])
    for row in ex2_rep.per_rho:
        assert abs(row["a_p"] - 1.0) < 1e-9
        assert abs(row["B_q"] - 0.3) < 1e-9
        assert row["a_V"] < -0.3


def test_ex2_hypotheses(ex2_rep, ex2_doc):
    hyp = C.check_hypotheses(ex2_doc.spec, ex2_doc.domain, report=ex2_rep)
    assert hyp.verdicts == {"H1": True, "H2": True, "H3": False}
    assert hyp.failed == ["H3"]
    assert len(hyp.orbits) == 2
    assert all(o.exited for o in hyp.orbits)
    with pytest.raises(HypothesisFailure) as err:
        hyp.raise_if_failed()
    assert err.value.hypothesis == "H3"
    assert hyp.raise_if_failed(force=True) is hyp


def test_ex2_h2_margin_values(ex2_rep):
    # 2 + B_q/c_p = 2.3 against 1 - A_p/d_p = 0.96
    lhs = 2.0 + ex2_rep.B_q / ex2_rep.c_p
    rhs = 1.0 - ex2_rep.A_p / ex2_rep.d_p
    assert abs(lhs - 2.3) < 1e-6
    assert abs(rhs - 0.96) < 1e-6


def test_ex2_sample_budget(ex2_rep):
    assert ex2_rep.sample_size >= 1000


# ---------------------------------------------------------------------------
# ex3 on the punctured ball: a_p = 1/2 on the diagonal, A_p = 0 on the axes
# ---------------------------------------------------------------------------

def test_ex3_exact_extremes(ex3_rep):
    assert abs(ex3_rep.a_p - 0.5) < 1e-9
    assert abs(ex3_rep.A_p) < 1e-12
    assert abs(ex3_rep.b_p - 1.0) < 1e-12
    assert abs(ex3_rep.B_p - 3.0) < 1e-9
    assert abs(ex3_rep.B_q - 2.0) < 1e-12


def test_ex3_invariance(ex3_rep):
    assert 0.45 < ex3_rep.a_V < 0.501


def test_ex3_witness_directions(ex3_rep):
    # decay floor is attained on a diagonal, tangential floor on an axis
    xa = ex3_rep.witnesses["a"]["x"]
    assert abs(abs(xa[0]) - abs(xa[1])) < 1e-8 * np.linalg.norm(xa)
    xA = ex3_rep.witnesses["A"]["x"]
    assert min(abs(xA[0]), abs(xA[1])) < 1e-8 * np.linalg.norm(xA)


def test_ex3_hypotheses_pass(ex3_rep, ex3_doc):
    hyp = C.check_hypotheses(ex3_doc.spec, ex3_doc.domain, report=ex3_rep)
    assert hyp.ok
    assert hyp.orbits == []


def test_ex3_budget_gamma3(ex3_rep):
    bud = C.regularity_budget(ex3_rep)
    assert bud.case == "finite"
    assert abs(bud.rate - 1.0) < 1e-9
    assert abs(bud.bound - 4.0) < 1e-9
    assert bud.gamma == 3
    # N - 1 + floor(0.99 * B_p/a_p + gamma * rate) = 2 + floor(8.94)
    assert bud.ell_f == 10


def test_ex3_no_warnings(ex3_rep):
    assert ex3_rep.warnings == []


# ---------------------------------------------------------------------------
# solvability margins
# ---------------------------------------------------------------------------

def test_margin_fibre_equation():
    m = C.solvability_margin(1, a=0.5, b=1.0, A=0.0, B=2.0)
    assert m.c == 1.0 and m.d == 0.5
    assert abs(m.margin - 3.0) < 1e-12
    assert m.solvable


def test_margin_tangential_equation():
    # expansion enters as B = -B_p, selecting c = a
    m = C.solvability_margin(1, a=0.5, b=1.0, A=0.0, B=-3.0)
    assert m.c == 0.5
    assert abs(m.margin - (-5.0)) < 1e-12
    assert not m.solvable


def test_margin_zero_forcing_selects_floor():
    m = C.solvability_margin(2, a=0.25, b=1.0, A=0.1, B=0.0)
    assert m.c == 0.25 and m.d == 1.0


def test_margin_needs_positive_floor():
    with pytest.raises(BudgetUndefined):
        C.solvability_margin(1, a=0.0, b=1.0, A=0.0, B=-1.0)


# ---------------------------------------------------------------------------
# subproblem constants
# ---------------------------------------------------------------------------

def test_radial_subproblem_constants():
    prob = example("ex1-radial")
    sub = C.estimate_subproblem_constants(prob.pa, prob.Q, prob.domain)
    assert sub.N == 3 and sub.deg_Q == 2
    assert abs(sub.a - 1.0) < 1e-9
    assert abs(sub.b - 1.0) < 1e-9
    assert abs(sub.A - 1.0) < 1e-9          # ||I + D pa|| = 1 - ||x||^2
    assert abs(sub.B_dpa - 3.0) < 1e-9
    # the nilpotent part moves the singular values by e/4 at worst:
    # ||I - Q|| = 1 - (d - e/4) r^2 + O(r^4), ||I + Q|| = 1 + (d + e/4) r^2 + ...
    assert abs(sub.B - 0.425) < 2e-3
    assert abs(sub.A_plus - 0.575) < 2e-3
    assert sub.B <= sub.A_plus + 1e-12
    assert sub.hp1 and sub.hp2
    assert 0.9 < sub.C < 1.01
    m = sub.margin(1)
    assert 2.41 < m.margin < 2.43


def test_subproblem_zero_forcing_matrix():
    pa = SparsePolynomial(1, [{(3,): -1.0}])
    dom = DomainSpec("ray", 1, 0.5, Norm("max"))
    sub = C.estimate_subproblem_constants(pa, None, dom)
    assert sub.N == 3
    assert sub.B == 0.0 and sub.A_plus == 0.0
    assert abs(sub.a - 1.0) < 1e-9
    assert abs(sub.b - 1.0) < 1e-9
    assert abs(sub.A - 3.0) < 1e-9
    assert sub.sample_size >= 1000


# ---------------------------------------------------------------------------
# M < N: the fibre condition is algebraic invertibility on the section
# ---------------------------------------------------------------------------

def _fibre_dominant_spec(b=0.4):
    p = SparsePolynomial(2, [{(3, 0): -1.0}])
    q = SparsePolynomial(2, [{(1, 1): b}])
    return MapSpec(n=1, m=1, N=3, M=2, r=3, p=p, q=q)


def test_section_invertibility_route():
    spec = _fibre_dominant_spec()
    dom = DomainSpec("ray", 1, 0.5, Norm("max"))
    hyp = C.check_hypotheses(spec, dom)
    assert hyp.ok
    assert "singular value" in hyp.details["H2"]
    bud = C.regularity_budget(hyp.constants, ell=5)
    assert bud.case == "analytic"
    assert bud.gamma is None
    assert bud.ell_f == 5


def test_section_invertibility_detects_degenerate_block():
    p = SparsePolynomial(2, [{(3, 0): -1.0}])
    q = SparsePolynomial(2, [{(0, 2): 1.0}])   # D_y q(x, 0) = 0 identically
    spec = MapSpec(n=1, m=1, N=3, M=2, r=3, p=p, q=q)
    dom = DomainSpec("ray", 1, 0.5, Norm("max"))
    hyp = C.check_hypotheses(spec, dom)
    assert hyp.verdicts["H2"] is False


# ---------------------------------------------------------------------------
# regularity budget corner cases
# ---------------------------------------------------------------------------

def test_budget_analytic_case():
    bud = C.regularity_budget(_report(A_p=2.0, B_p=3.0))
    assert bud.case == "analytic"
    assert bud.gamma is None
    assert bud.ell_f == 3            # 1 + floor(0.99 * 3)
    assert bud.boundary_flag         # ratio sits exactly on an integer


def test_budget_smooth_case():
    bud = C.regularity_budget(_report(A_p=1.0, B_p=3.0))
    assert bud.case == "smooth"
    assert any("C-infinity" in s for s in bud.notes)


def test_budget_finite_exact_integer_bound():
    # rate 1, bound 4: an exact integer boundary resolves to gamma = 3
    bud = C.regularity_budget(
        _report(N=3, M=3, a_p=0.5, b_p=1.0, A_p=0.0, B_p=3.0, B_q=2.0, A_q=2.0))
    assert bud.gamma == 3
    assert bud.ell_f == 10           # 2 + floor(0.99 * 6 + 3)
    assert bud.boundary_flag


def test_budget_finite_ex4_numbers():
    bud = C.regularity_budget(
        _report(N=2, M=3, a_p=1.0, b_p=2.0, A_p=0.0, B_p=4.0, B_q=1.0, A_q=2.0))
    assert bud.case == "finite"
    assert bud.gamma == 1
    assert bud.ell_f == 5
    assert bud.boundary_flag


def test_budget_undefined_when_rate_exceeds_bound():
    with pytest.raises(BudgetUndefined):
        C.regularity_budget(_report(A_p=-1.0, B_q=-0.5, A_q=0.5))


def test_budget_needs_decay():
    with pytest.raises(BudgetUndefined):
        C.regularity_budget(_report(a_p=-0.1))


# ---------------------------------------------------------------------------
# sampling machinery
# ---------------------------------------------------------------------------

def test_convention_checks_flag_inconsistent_values():
    bad = _report(a_p=1.0, b_p=0.5, A_p=3.0, B_p=1.0, B_q=2.0, A_q=1.0)
    msgs = C.convention_checks(bad)
    assert len(msgs) == 4
    joined = " | ".join(msgs)
    for frag in ("exceeds b_p", "below A_p/N", "exceeds A_q", "below N a_p"):
        assert frag in joined


def test_nested_grids_tighten_suprema():
    doc = example("ex2-divergent")
    coarse = C.ConstantsConfig(section_interior=56, radii_count=6,
                               refine_rounds=0, min_budget=1)
    fine = C.ConstantsConfig(section_interior=113, radii_count=12,
                             refine_rounds=0, min_budget=1)
    rc = C.estimate_map_constants(doc.spec, doc.domain, coarse)
    rf = C.estimate_map_constants(doc.spec, doc.domain, fine)
    # the fine grid contains the coarse one, so suprema only move one way
    assert rf.a_p <= rc.a_p + 1e-12
    assert rf.A_p <= rc.A_p + 1e-12
    assert rf.b_p >= rc.b_p - 1e-12
    assert rf.B_p >= rc.B_p - 1e-12
    assert rf.a_V <= rc.a_V + 1e-12


def test_nested_grids_tighten_suprema_on_circle():
    doc = example("ex3")
    coarse = C.ConstantsConfig(section_circle=64, radii_count=6,
                               refine_rounds=0, min_budget=1)
    fine = C.ConstantsConfig(section_circle=128, radii_count=12,
                             refine_rounds=0, min_budget=1)
    rc = C.estimate_map_constants(doc.spec, doc.domain, coarse)
    rf = C.estimate_map_constants(doc.spec, doc.domain, fine)
    assert rf.a_p <= rc.a_p + 1e-12
    assert rf.B_p >= rc.B_p - 1e-12


def test_empty_pool_raises():
    doc = example("ex2-divergent")
    cfg = C.ConstantsConfig(radii_count=0, min_budget=0)
    with pytest.raises(EmptyDomainSample):
        C.estimate_map_constants(doc.spec, doc.domain, cfg)


def test_escaping_orbit_paths():
    doc = example("ex2-divergent")
    orbit = C.escaping_orbit(doc.spec, doc.domain, np.array([0.1, 0.04]))
    assert orbit.exited
    k = orbit.exit_index
    assert k is not None and 2 <= k <= 60
    assert bool(doc.domain.member(orbit.points[k - 1]))
    assert orbit.distances[k] <= 0
    # on the symmetry axis the ratio never grows: no escape
    stays = C.escaping_orbit(doc.spec, doc.domain, np.array([0.1, 0.0]),
                             max_steps=50)
    assert not stays.exited
    assert stays.exit_index is None
