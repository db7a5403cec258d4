"""Certified global solutions and solution gradients for homogenized QCQPs.

The package solves parameterized polynomial optimization problems posed as
homogenized QCQPs through their semidefinite relaxation, certifies global
optimality of the extracted solutions, and backpropagates loss gradients
through the certified solution map to the problem's cost and constraint
matrices.
"""

from . import autotight, certify, diff, errors, linalg, qcqp, sdp
from .autotight import FeasibleSampler, find_constraints, tighten_loop
from .certify import (CertifiedSolution, certificate_check, certify as certify_solution,
                      extract_rank1, suboptimality_gap, tightness_ratio)
from .diff import (GradientReport, KKTWorkspace, apply_n_adjoint, backprop_cift,
                   backprop_is, fd_jacobian_oracle, kkt_workspace, solve_certified)
from .linalg import EigDecomp, LinearOperator, eigh_sorted, lsqr_solve, select_independent_rows
from .qcqp import (HomQCQP, ParamSymMatrix, build_hom_qcqp, certificate_matrix,
                   constraint_gradients, eval_objective_and_residuals,
                   vectorize_params)
from .sdp import (SDPPrimalDual, ShorSDP, build_shor_relaxation,
                  inject_external_solution, solve_sdp)

__version__ = "0.1.0"

__all__ = [
    "FeasibleSampler", "find_constraints", "tighten_loop",
    "CertifiedSolution", "certificate_check", "certify_solution",
    "extract_rank1", "suboptimality_gap", "tightness_ratio",
    "GradientReport", "KKTWorkspace", "apply_n_adjoint", "backprop_cift",
    "backprop_is", "fd_jacobian_oracle", "kkt_workspace", "solve_certified",
    "EigDecomp", "LinearOperator", "eigh_sorted", "lsqr_solve",
    "select_independent_rows",
    "HomQCQP", "ParamSymMatrix", "build_hom_qcqp", "certificate_matrix",
    "constraint_gradients", "eval_objective_and_residuals", "vectorize_params",
    "SDPPrimalDual", "ShorSDP", "build_shor_relaxation",
    "inject_external_solution", "solve_sdp",
    "autotight", "certify", "diff", "errors", "linalg", "qcqp", "sdp",
]
