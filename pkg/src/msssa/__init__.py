"""Structured sparse decomposition of multi-channel signals.

The main entry point is :func:`msssa.solver.solve`, a split Bregman solver
for ``|Y - Phi X|^2 + lambda1 |X|_1 + lambda2 |X P|_1``.  Comparison solvers
live in :mod:`msssa.baselines`, synthetic data in :mod:`msssa.synth` and the
benchmark drivers in :mod:`msssa.experiments`.
"""

from .errors import *  # noqa: F401,F403
from .linalg import build_tv_matrix, pseudo_inverse, sylvester_solve_diag, sym_eigendecompose
from .solver import Problem, SolveReport, SolverConfig, objective, solve

__version__ = "0.1.0"

__all__ = [
    "Problem",
    "SolverConfig",
    "SolveReport",
    "solve",
    "objective",
    "build_tv_matrix",
    "pseudo_inverse",
    "sylvester_solve_diag",
    "sym_eigendecompose",
]
