"""Exception types shared across the package.

Every error raised by the library derives from ParamanError so callers can
distinguish library failures from programming errors.  The CLI maps these to
exit codes (hypothesis failures -> 2, divergence diagnoses -> 3, the rest -> 1).
"""


class ParamanError(Exception):
    """Base class for all library errors."""


# --- model ---------------------------------------------------------------

class ParseError(ParamanError):
    """Problem document could not be parsed; carries a line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ParamanError):
    """Parsed document violates a structural requirement."""


class OutOfDomain(ParamanError):
    """Evaluation requested at a point outside the domain of validity."""


# --- graded --------------------------------------------------------------

class StaleInterpolant(ParamanError):
    """Interpolant built on a grid version that has since been rebuilt."""


class IllConditionedExtraction(ParamanError):
    """Radial Vandermonde system too ill-conditioned to separate degrees."""


class FitResidualTooLarge(ParamanError):
    """Homogeneous-component fit left a residual inconsistent with the declared degrees."""


class NearBoundary(ParamanError):
    """Evaluation too close to the edge of the covered cross-section chart."""


class DegreeOverflow(ParamanError):
    """Requested degree exceeds the configured tracking cap."""


# --- constants -----------------------------------------------------------

class EmptyDomainSample(ParamanError):
    """Sampling produced no admissible points (domain/radius mismatch)."""


class BudgetUndefined(ParamanError):
    """Regularity budget has no admissible integer (gamma would be < 1)."""


# --- cohomology ----------------------------------------------------------

class LeftDomain(ParamanError):
    """Trajectory left the domain cone; signals positive-invariance failure."""

    def __init__(self, message, x0=None, t_exit=None):
        super().__init__(message)
        self.x0 = x0
        self.t_exit = t_exit


class StepUnderflow(ParamanError):
    """ODE integrator could not continue (step size collapsed)."""


class NonIntegrableTail(ParamanError):
    """Decay exponent certifies a non-integrable tail (kappa <= 1)."""

    def __init__(self, message, kappa=None):
        super().__init__(message)
        self.kappa = kappa


class DivergentCohomologicalIntegral(ParamanError):
    """The defining improper integral diverges (or cannot converge within budget)."""

    def __init__(self, message, degree=None, kappa_hat=None, diagnostics=None):
        super().__init__(message)
        self.degree = degree
        self.kappa_hat = kappa_hat
        self.diagnostics = diagnostics or {}


class NotRadial(ParamanError):
    """Field does not have the radial form p0(x) * x."""


class SingularPencil(ParamanError):
    """(mu+1) p0(x) Id - Q(x) is singular somewhere on the section."""


class SingularAt(ParamanError):
    """Pointwise linear solve hit a singular matrix; carries the witness point."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


# --- parametrize ---------------------------------------------------------

class HypothesisFailure(ParamanError):
    """A standing hypothesis failed; names the hypothesis and carries witnesses."""

    def __init__(self, message, hypothesis=None, witnesses=None):
        super().__init__(message)
        self.hypothesis = hypothesis
        self.witnesses = witnesses or []


# --- verify --------------------------------------------------------------

class DegenerateFit(ParamanError):
    """All residual samples sat at the machine floor; no slope can be fitted."""


# --- cli -----------------------------------------------------------------

class UnknownExample(ParamanError):
    """Requested bundled example name is not in the registry."""
