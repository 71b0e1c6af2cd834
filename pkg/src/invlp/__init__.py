"""Learning parametric linear programs from observed optimal decisions.

Modules
-------
lp       LP data types, KKT checks and a vertex-enumeration oracle.
ipm      Homogeneous self-dual interior-point solver.
grad     Loss gradients with respect to LP coefficients.
models   Parametric LP families and target generation.
ilop     Outer learning problem and target-feasibility constraints.
nlp      SQP and random-search outer solvers.
bench    Trials, suites and the generalization study.
"""
from ._jit import USE_NUMBA
from .grad import CoefficientJacobians, Loss, Method
from .ilop import IlopProblem, build_nlp, outer_objective, stack_outer_constraints
from .ipm import IpmSettings, solve, solve_batch
from .lp import LinearProgram, PrimalDualSolution, Status, vertex_enumeration_solve
from .models import ParametricModel, build_model, generate_observations
from .nlp import NlpProblem, SqpOptions, random_search, sqp_solve

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA",
    "CoefficientJacobians",
    "Loss",
    "Method",
    "IlopProblem",
    "build_nlp",
    "outer_objective",
    "stack_outer_constraints",
    "IpmSettings",
    "solve",
    "solve_batch",
    "LinearProgram",
    "PrimalDualSolution",
    "Status",
    "vertex_enumeration_solve",
    "ParametricModel",
    "build_model",
    "generate_observations",
    "NlpProblem",
    "SqpOptions",
    "random_search",
    "sqp_solve",
]
