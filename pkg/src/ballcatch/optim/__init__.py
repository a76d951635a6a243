"""Solver cores: dense convex QP and a small SQP for constrained NLPs."""
from .report import SolveReport
from .qp import QpProblem, QpError, solve_qp, kkt_residual
from .sqp import NlpProblem, SqpOptions, solve_sqp, fd_derivatives

__all__ = ["SolveReport", "QpProblem", "QpError", "solve_qp", "kkt_residual",
           "NlpProblem", "SqpOptions", "solve_sqp", "fd_derivatives"]
