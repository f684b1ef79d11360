"""paraman: order-by-order parametrization of stable manifolds of parabolic fixed points.

The pipeline: load a problem document (model), estimate the normal-form
constants and check the standing hypotheses (constants), solve the
cohomological equations degree by degree (cohomology, parametrize / flows),
and certify the residual orders (verify).  The `paraman` CLI drives the same
steps from the command line.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
