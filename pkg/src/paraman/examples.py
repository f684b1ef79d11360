"""Built-in worked problems used by the test-suite and the CLI.

Five registered names:

    ex1-radial      radial transport problem with a closed-form solution,
                    used to cross-check the two solver routes against
                    each other
    ex2-divergent   sector-cone map whose degree-2 fibre correction has a
                    non-integrable tail (decay exponent b + 3a = 0.9)
    ex2-convergent  same map with b = 0.6; the correction integrates to
                    -x2^3 / ((b + 3a - 1) x1)
    ex3             punctured-ball map with a finite-regularity graph
                    (gamma = 3) and a logarithmic closed form at degree 2
    ex4             sector-cone map with an obstructed x-equation at
                    degree 3: the normal-form route keeps a nonzero
                    remainder term, forcing K_x = 0 there diverges

The ex2 documents use rho = 0.2: the three quotient constants are exact
(a_p = 1, A_p = a^2, B_q = b) precisely while x1 <= a/(1 - a + a^2), and the
supremum defining a_p switches branch beyond that radius.
"""

import dataclasses

from .errors import UnknownExample
from .model import (DomainSpec, MapSpec, MatrixPoly, Norm, ProblemDocument,
                    RunOptions, SparsePolynomial)


@dataclasses.dataclass
class RadialProblem:
    """One transport problem D h . pa - Q h = w with radial pa."""

    name: str
    pa: SparsePolynomial
    Q: MatrixPoly
    w: SparsePolynomial
    nu: int
    domain: DomainSpec


def _ex2(variant, a=0.2, b=0.3):
    # x1' = x1 - x1^2, x2' = x2 - a x1 x2, y' = y + b x1 y + x2^3
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0}, {(1, 1, 0): -a}])
    q = SparsePolynomial(3, [{(1, 0, 1): b}])
    g = SparsePolynomial(3, [{(0, 3, 0): 1.0}])
    spec = MapSpec(n=2, m=1, N=2, M=2, r=3, p=p, q=q, higher_y=[(3, g)])
    dom = DomainSpec("sector-cone", 2, 0.2, Norm("max"), Norm("max"),
                     kappa=1.0 - a)
    run = RunOptions(ell=3, force=True)
    return ProblemDocument("map", spec, dom, run, name=f"ex2-{variant}")


def ex2_divergent():
    """Cone map where forward invariance fails and the degree-2 fibre
    integral has decay exponent b + 3a = 0.9 <= 1."""
    return _ex2("divergent", a=0.2, b=0.3)


def ex2_convergent():
    """Same map with b = 0.6 (exponent 1.2): the degree-2 correction is
    -x2^3 / ((b + 3a - 1) x1)."""
    return _ex2("convergent", a=0.2, b=0.6)


def ex3():
    """Punctured-ball map with gamma = 3.

    x' = x - (x1^3, c x2^3), y' = y (1 + d ||x||^2) + x1^2 x2^2, Euclidean
    norm, c = 1, d = 2.  The degree-2 fibre correction has the closed form
    -x1^2 x2^2 [ (c x2^2 + x1^2) / (2 (c x2^2 - x1^2)^2)
                 - c x1^2 x2^2 log(c x2^2 / x1^2) / (c x2^2 - x1^2)^3 ]
    (finite at c x2^2 = x1^2 with value -x1^2 x2^2 / (6 x1^4) there, but the
    printed form loses precision near that line).
    """
    c, d = 1.0, 2.0
    p = SparsePolynomial(3, [{(3, 0, 0): -1.0}, {(0, 3, 0): -c}])
    q = SparsePolynomial(3, [{(2, 0, 1): d, (0, 2, 1): d}])
    g = SparsePolynomial(3, [{(2, 2, 0): 1.0}])
    spec = MapSpec(n=2, m=1, N=3, M=3, r=4, p=p, q=q, higher_y=[(4, g)])
    dom = DomainSpec("punctured-ball", 2, 0.5, Norm("euclid"), Norm("euclid"))
    run = RunOptions(ell=4, nodes=257)
    return ProblemDocument("map", spec, dom, run, name="ex3")


def ex4():
    """Cone map (kappa = 1, sup norm) with an obstructed x-equation.

    x' = x - (x1^2, 2 x1 x2) + (x1^3, 0), y' = y (1 + x1^2 + x2^2).  At
    degree 3 the x-forcing x1^3 meets a transport integrand decaying like
    1/t: the normal-form route stores it in the conjugated map instead and
    the forced route diverges logarithmically.
    """
    p = SparsePolynomial(3, [{(2, 0, 0): -1.0}, {(1, 1, 0): -2.0}])
    q = SparsePolynomial(3, [{(2, 0, 1): 1.0, (0, 2, 1): 1.0}])
    f = SparsePolynomial(3, [{(3, 0, 0): 1.0}, {}])
    spec = MapSpec(n=2, m=1, N=2, M=3, r=3, p=p, q=q, higher_x=[(3, f)])
    dom = DomainSpec("sector-cone", 2, 0.5, Norm("max"), Norm("max"), kappa=1.0)
    run = RunOptions(ell=3)
    return ProblemDocument("map", spec, dom, run, name="ex4")


def ex1_radial():
    """pa = -||x||^2 x with a lower-triangular forcing matrix.

    Radial structure makes the transport equation algebraic: with
    h homogeneous of degree nu + 1, D h . pa = -(nu + 1) ||x||^2 h, so
    h(x) = -[(nu + 1) ||x||^2 I + Q(x)]^{-1} w(x) pointwise.  The general
    quadrature route must reproduce that to quadrature accuracy.
    """
    pa = SparsePolynomial(2, [{(3, 0): -1.0, (1, 2): -1.0},
                              {(2, 1): -1.0, (0, 3): -1.0}])
    dq, eq = 0.5, 0.3
    r2 = {(2, 0): dq, (0, 2): dq}
    Q = MatrixPoly([
        [SparsePolynomial(2, [dict(r2)]), SparsePolynomial(2, [{}])],
        [SparsePolynomial(2, [{(1, 1): eq}]), SparsePolynomial(2, [dict(r2)])],
    ])
    w = SparsePolynomial(2, [{(4, 0): 1.0}, {(2, 2): 1.0}])
    dom = DomainSpec("punctured-ball", 2, 0.5, Norm("euclid"), Norm("euclid"))
    return RadialProblem("ex1-radial", pa, Q, w, nu=1, domain=dom)


EXAMPLES = {
    "ex1-radial": ex1_radial,
    "ex2-divergent": ex2_divergent,
    "ex2-convergent": ex2_convergent,
    "ex3": ex3,
    "ex4": ex4,
}


def example(name):
    """Build a fresh problem object for a registered name."""
    try:
        builder = EXAMPLES[name]
    except KeyError:
        raise UnknownExample(
            f"unknown example {name!r}; available: {', '.join(sorted(EXAMPLES))}")
    return builder()


def list_examples():
    return sorted(EXAMPLES)
