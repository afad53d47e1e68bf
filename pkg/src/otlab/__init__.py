"""otlab: a numerical laboratory for optimal transport with radial convex costs.

Computes optimal transport for costs c(x, y) = h(x - y) built from a strictly
convex radial profile, recovers Kantorovich potentials via c-transforms,
checks the gradient-integral inequality
``\\int (grad rho . grad_H(grad phi) + grad g . grad_H(grad psi)) >= 0``
together with its supporting identities, and runs minimizing-movement (JKO)
flows with total-variation tracking against a reference diffusion solver.
"""

from . import cost, fivegrad, geometry, jko, ot_core
from .errors import OTLabError

__version__ = "0.1.0"

__all__ = ["geometry", "cost", "ot_core", "fivegrad", "jko", "OTLabError", "__version__"]
