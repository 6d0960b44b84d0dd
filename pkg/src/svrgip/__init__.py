"""Iterative regularization with (regularized) stochastic variance reduced gradient."""

from .linop import BlockOperator, TruncationRule, compute_norms, truncate
from .problems import InverseProblem, generate_problem, make_problem, make_diagonal_problem
from .solvers import RunRecord, SolverConfig, StoppingRule, solve

__version__ = "0.1.0"

__all__ = [
    "BlockOperator",
    "TruncationRule",
    "compute_norms",
    "truncate",
    "InverseProblem",
    "generate_problem",
    "make_problem",
    "make_diagonal_problem",
    "RunRecord",
    "SolverConfig",
    "StoppingRule",
    "solve",
]
