"""ufgsim: geometry checks, simulation and diagnostics for degenerate diffusions.

The package analyzes Stratonovich systems dX = V0 dt + sqrt(2) sum V_i o dB
whose noise fields need not span the state space: it builds the iterated
bracket hierarchy of the driving fields, tests finite-generation /
Hoermander / alignment / Lyapunov conditions pointwise, splits the drift
into its bracket-span and orthogonal parts, constructs local straightening
charts, simulates reproducible path ensembles together with their
variational Jacobians and Malliavin covariance, and verifies long-time and
density statements on a catalog of closed-form examples.
"""

from . import catalog, diagnostics, dynamics, expr, fields, geometry, malliavin

__all__ = [
    "catalog",
    "diagnostics",
    "dynamics",
    "expr",
    "fields",
    "geometry",
    "malliavin",
]

__version__ = "0.1.0"
