import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paraman.errors import ParseError, ValidationError
from paraman.model import (
    DomainSpec, MapSpec, Norm, ProblemDocument, RunOptions, SparsePolynomial,
    dump_problem, evaluate_map, load_problem,
)


def make_ex2_spec(a=0.2, b=0.3):
    # F(x, y) = (x1 - x1^2, x2 - a x1 x2, y + b x1 y + x2^3)
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0}, {(1, 1, 0): -a}])
    q = SparsePolynomial(3, [{(1, 0, 1): b}])
    g = SparsePolynomial(3, [{(0, 3, 0): 1.0}])
    return MapSpec(n=2, m=1, N=2, M=2, r=4, p=p, q=q, higher_y=[(3, g)])


# --- polynomials -----------------------------------------------------------

def test_polynomial_evaluate_hand_value():
    p = SparsePolynomial(2, [{(2, 0): 3.0, (0, 1): -1.0}])
    assert p.evaluate(np.array([2.0, 5.0]))[0] == pytest.approx(3 * 4 - 5)
    batch = p.evaluate(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert batch.shape == (2, 1)
    assert batch[0, 0] == 3.0 and batch[1, 0] == -2.0


def test_partial_and_jacobian_are_exact():
    # p(x) = (x1^3 x2, x2^2)
    p = SparsePolynomial(2, [{(3, 1): 1.0}, {(0, 2): 1.0}])
    x = np.array([1.5, -2.0])
    jac = p.jacobian(x)
    assert jac[0, 0] == pytest.approx(3 * 1.5 ** 2 * -2.0)
    assert jac[0, 1] == pytest.approx(1.5 ** 3)
    assert jac[1, 0] == 0.0
    assert jac[1, 1] == pytest.approx(-4.0)


@settings(max_examples=60, deadline=None)
@given(
    deg=st.integers(min_value=1, max_value=6),
    lam=st.floats(min_value=0.05, max_value=1.0),
    seed=st.integers(min_value=0, max_value=10 ** 6),
)
def test_homogeneous_scaling_property(deg, lam, seed):
    rng = np.random.default_rng(seed)
    exps = [tuple(v) for v in rng.multinomial(deg, [0.5, 0.5], size=4)]
    comp = {e: float(rng.normal()) for e in exps}
    p = SparsePolynomial(2, [comp])
    x = rng.normal(size=2)
    a = p.evaluate(lam * x)[0]
    b = lam ** deg * p.evaluate(x)[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_restrict_tail_zero():
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0, (1, 0, 1): 5.0}])
    pa = p.restrict_tail_zero(2)
    assert pa.arity == 2
    assert pa.comps[0] == {(2, 0): -1.0}


def test_mul_scalar_poly():
    v = SparsePolynomial(2, [{(1, 0): 1.0}, {(0, 1): 1.0}])
    s = SparsePolynomial(2, [{(1, 1): 2.0}])
    prod = v.mul_scalar_poly(s)
    assert prod.comps[0] == {(2, 1): 2.0}
    assert prod.comps[1] == {(1, 2): 2.0}


# --- norms -----------------------------------------------------------------

def test_norm_vector_and_operator_values():
    mx = Norm("max")
    eu = Norm("euclid")
    v = np.array([3.0, -4.0])
    assert mx.vec(v) == 4.0
    assert eu.vec(v) == 5.0
    A = np.array([[1.0, -2.0], [3.0, 4.0]])
    assert mx.op(A) == 7.0
    B = np.array([[3.0, 0.0], [4.0, 0.0]])
    assert eu.op(B) == pytest.approx(5.0)


def test_weighted_norm():
    w = Norm("max", weights=[2.0, 1.0])
    assert w.vec(np.array([1.0, 1.0])) == 2.0
    # operator norm of identity is 1 in any induced norm
    assert w.op(np.eye(2)) == pytest.approx(1.0)
    assert Norm.parse("weighted-max:2,1") == w


def test_dual_norm_for_face_distance():
    assert Norm("max").dual_vec(np.array([0.8, 1.0])) == pytest.approx(1.8)
    assert Norm("euclid").dual_vec(np.array([1.0, 1.0])) == pytest.approx(np.sqrt(2))


# --- domains ---------------------------------------------------------------

def test_sector_cone_membership_and_distance():
    dom = DomainSpec("sector-cone", n=2, rho=2.0, norm_x=Norm("max"), kappa=0.8)
    assert dom.member(np.array([1.0, 0.5]))
    assert not dom.member(np.array([1.0, 0.9]))
    assert not dom.member(np.array([-1.0, 0.0]))
    # exact sup-norm distance to the cone face through the dual norm
    d = dom.boundary_distance(np.array([1.0, 0.0]))
    assert d == pytest.approx(0.8 / 1.8)


def test_punctured_ball_distance():
    dom = DomainSpec("punctured-ball", n=2, rho=1.0, norm_x=Norm("euclid"))
    d = dom.boundary_distance(np.array([0.3, 0.0]))
    assert d == pytest.approx(0.3)
    d2 = dom.boundary_distance(np.array([0.9, 0.0]))
    assert d2 == pytest.approx(0.1)


def test_euclid_cone_distance():
    dom = DomainSpec("sector-cone", n=2, rho=10.0, norm_x=Norm("euclid"), kappa=1.0)
    assert dom.boundary_distance(np.array([1.0, 0.0])) == pytest.approx(1 / np.sqrt(2))


def test_chart_roundtrip_sector():
    dom = DomainSpec("sector-cone", n=2, rho=0.5, norm_x=Norm("max"), kappa=0.8)
    chart = dom.section_chart()
    s = np.linspace(-0.95, 0.95, 21)
    u = chart.direction(s)
    assert np.allclose(dom.norm_x.vec(u), 1.0)
    assert np.allclose(chart.param_of(u), s, atol=1e-12)
    # sup-norm section of this cone is the segment x1 = 1
    assert np.allclose(u[:, 0], 1.0)


def test_chart_roundtrip_circle():
    dom = DomainSpec("punctured-ball", n=2, rho=1.0, norm_x=Norm("euclid"))
    chart = dom.section_chart()
    th = np.linspace(0, 2 * np.pi, 33, endpoint=False)
    u = chart.direction(th)
    assert np.allclose(np.hypot(u[:, 0], u[:, 1]), 1.0)
    assert np.allclose(chart.param_of(u), th, atol=1e-12)


def test_star_shaped_scaling_stays_inside():
    dom = DomainSpec("sector-cone", n=2, rho=0.5, norm_x=Norm("max"), kappa=0.8)
    x = np.array([0.3, 0.2])
    for lam in (0.9, 0.5, 0.1, 0.01):
        assert dom.member(lam * x)


# --- map specs ---------------------------------------------------------------

def test_evaluate_map_hand_value():
    spec = make_ex2_spec()
    z = np.array([1.0, 1.0, 0.0])
    out = evaluate_map(spec, z)
    assert np.allclose(out, [0.0, 0.8, 1.0])


def test_q_with_x_only_monomial_rejected():
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0}, {(1, 1, 0): -0.2}])
    q_bad = SparsePolynomial(3, [{(2, 0, 0): 1.0}])  # q(x, 0) != 0
    with pytest.raises(ValidationError, match="q\\(x, 0\\)"):
        MapSpec(n=2, m=1, N=2, M=2, r=4, p=p, q=q_bad)


def test_inhomogeneous_p_rejected():
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0, (3, 0, 0): 1.0}, {}])
    q = SparsePolynomial(3, [{(1, 0, 1): 1.0}])
    with pytest.raises(ValidationError):
        MapSpec(n=2, m=1, N=2, M=2, r=4, p=p, q=q)


def test_jacobian_blocks():
    spec = make_ex2_spec(a=0.2, b=0.3)
    x = np.array([0.5, 0.25])
    Dxp = spec.Dxp0().evaluate(x)
    assert np.allclose(Dxp, [[-1.0, 0.0], [-0.05, -0.1]])
    Dyq = spec.Dyq0().evaluate(x)
    assert np.allclose(Dyq, [[0.15]])
    assert spec.Dyp0().is_zero()
    pa = spec.pa()
    assert np.allclose(pa.evaluate(x), [-0.25, -0.025])


# --- documents ---------------------------------------------------------------

EX2_DOC = """
# parabolic map with resonant y-forcing
[map]
n = 2
m = 1
N = 2
M = 2
r = 4
[map.p]
component 1 degree 2
-1.0   2 0 0
component 2 degree 2
-0.2   1 1 0
[map.q]
component 1 degree 2
0.3    1 0 1
[map.g]
component 1 degree 3
1.0    0 3 0
[domain]
kind = sector-cone
kappa = 0.8
rho = 0.5
norm_x = max
norm_y = max
[run]
ell = 3
force = true
"""


def test_load_problem_ex2():
    doc = load_problem(EX2_DOC, name="ex2")
    assert doc.kind == "map"
    spec = doc.mapspec
    assert (spec.n, spec.m, spec.N, spec.M, spec.L) == (2, 1, 2, 2, 2)
    assert spec.p.comps[0] == {(2, 0, 0): -1.0}
    assert doc.domain.kappa == 0.8
    assert doc.run.force and doc.run.ell == 3
    out = evaluate_map(spec, np.array([1.0, 1.0, 0.0]))
    assert np.allclose(out, [0.0, 0.8, 1.0])


def test_document_roundtrip_identity():
    doc = load_problem(EX2_DOC, name="ex2")
    text = dump_problem(doc)
    doc2 = load_problem(text, name="ex2")
    assert doc2.mapspec.p == doc.mapspec.p
    assert doc2.mapspec.q == doc.mapspec.q
    assert doc2.mapspec.higher_y[0][1] == doc.mapspec.higher_y[0][1]
    assert doc2.domain == doc.domain
    assert doc2.run == doc.run
    # serialization is canonical: a second round trip gives identical text
    assert dump_problem(doc2) == text


def test_parse_error_reports_line():
    bad = EX2_DOC.replace("-1.0   2 0 0", "-1.0   2 0")
    with pytest.raises(ParseError, match="line"):
        load_problem(bad)


def test_header_degree_mismatch():
    bad = EX2_DOC.replace("1.0    0 3 0", "1.0    0 2 0")
    with pytest.raises(ParseError, match="degree"):
        load_problem(bad)


def test_missing_domain_section():
    txt = EX2_DOC.split("[domain]")[0]
    with pytest.raises(ParseError, match="domain"):
        load_problem(txt)


def test_field_document_with_forcing():
    txt = EX2_DOC.replace("[map", "[field").replace("force = true", "force = true\nell = 3")
    txt += "\n"
    txt = txt.replace(
        "[field.g]\ncomponent 1 degree 3\n1.0    0 3 0",
        "[field.g]\ncomponent 1 degree 3\n1.0    0 3 0\n"
        "component 1 degree 3 harmonic cos 1\n0.5  0 3 0")
    doc = load_problem(txt)
    assert doc.kind == "field"
    assert len(doc.spec.forcing) == 1
    fp = doc.spec.forcing[0]
    assert (fp.block, fp.degree, fp.harmonic, fp.phase) == ("y", 3, 1, "cos")
    X = doc.spec.X(np.array([0.5, 0.25, 0.0]), t=0.0)
    # cos(0) = 1: forcing contributes 0.5 * x2^3 on top of g = x2^3
    assert X[2] == pytest.approx(1.5 * 0.25 ** 3)


def test_mean_forcing_below_order_rejected():
    txt = EX2_DOC.replace("[map", "[field")
    txt = txt.replace(
        "[field.g]\ncomponent 1 degree 3\n1.0    0 3 0",
        "[field.g]\ncomponent 1 degree 3 harmonic cos 0\n1.0  0 3 0")
    # harmonic 0 at degree 3 > M = 2 is fine; degree 2 would not be
    load_problem(txt)
    bad = txt.replace("component 1 degree 3 harmonic cos 0\n1.0  0 3 0",
                      "component 1 degree 2 harmonic cos 0\n1.0  0 1 1")
    with pytest.raises(ValidationError, match="mean forcing"):
        load_problem(bad)
