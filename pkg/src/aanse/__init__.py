"""Anderson acceleration of the Picard iteration for steady incompressible Navier-Stokes.

Taylor-Hood (P2/P1) discretisation of the 2D lid-driven cavity, an exact
constrained least-squares Anderson mixer with gain diagnostics, and audits
of the convergence bounds against recorded traces.
"""

from .accel import (AndersonConfig, AndersonHistory, SolveTrace, audit_recursion, run_accelerated, solve_mixing,
                    theta_threshold)
from .fem2d import TaylorHoodSpace, build_cavity_mesh
from .nse import (PicardOperator, apply_G, audit_nse_m1, cavity_problem, estimate_kappa, run_anderson_picard,
                  run_newton, run_picard, solve_stokes)

__version__ = "0.1.0"

__all__ = [
    "AndersonConfig", "AndersonHistory", "PicardOperator", "SolveTrace", "TaylorHoodSpace", "apply_G",
    "audit_nse_m1", "audit_recursion", "build_cavity_mesh", "cavity_problem", "estimate_kappa",
    "run_accelerated", "run_anderson_picard", "run_newton", "run_picard", "solve_mixing", "solve_stokes",
    "theta_threshold",
]
