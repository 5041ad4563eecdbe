"""P1 finite elements for a parabolic problem with a nonlocal source.

The package discretizes u_t - div(k(u) grad u) = lam f(u) / (int f(u))^2
with homogeneous Dirichlet data on intervals and rectangles, steps it in
time with backward Euler, Crank-Nicolson or a linearized scheme, and
ships a manufactured-solution harness that confirms the expected
convergence orders empirically.
"""

from .coeff import (CoefficientSet, EvalError, Expr, HypothesisViolation,
                    differentiate, evaluate, make_coefficients, parse, preset,
                    substitute, to_source, validate_hypotheses)
from .fespace import (DofMap, FeFunction, QuadratureRule, assemble_load,
                      assemble_mass, assemble_stiffness,
                      assemble_weighted_stiffness_exact, elliptic_projection,
                      error_H1_semi, error_L2, interpolate, nonlocal_integral,
                      norm_H1_semi, norm_L2)
from .kernels import BACKEND
from .mesh import Mesh, make_interval_mesh, make_rect_mesh, refine
from .schemes import (NonlinearOptions, SchemeConfig, TimeStepRecord, run,
                      step_backward_euler, step_crank_nicolson,
                      step_linearized)
from .sparse import CsrMatrix, LinearSolveOptions, solve
from .verify import (ErrorReport, MmsProblem, build_mms, error_split,
                     spatial_eoc_study, temporal_eoc_study, uniqueness_probe)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CoefficientSet", "CsrMatrix", "DofMap", "ErrorReport",
    "EvalError", "Expr", "FeFunction", "HypothesisViolation",
    "LinearSolveOptions", "Mesh", "MmsProblem", "NonlinearOptions",
    "QuadratureRule", "SchemeConfig", "TimeStepRecord", "assemble_load",
    "assemble_mass", "assemble_stiffness",
    "assemble_weighted_stiffness_exact", "build_mms", "differentiate",
    "elliptic_projection", "error_H1_semi", "error_L2", "error_split",
    "evaluate", "interpolate", "make_coefficients", "make_interval_mesh",
    "make_rect_mesh", "nonlocal_integral", "norm_H1_semi", "norm_L2",
    "parse", "preset", "refine", "run", "solve", "spatial_eoc_study",
    "step_backward_euler", "step_crank_nicolson", "step_linearized",
    "substitute", "temporal_eoc_study", "to_source", "uniqueness_probe",
    "validate_hypotheses",
]
