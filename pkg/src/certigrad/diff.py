"""Backward passes for certified QCQP solutions.

Given the gradient of a downstream scalar loss with respect to the primal
solution x*, these routines produce the gradient with respect to the
vectorized cost/constraint matrices, by solving a least-squares system in
the KKT matrix

    M_r = 2 [[Hbar, G'], [G_r, 0]],

where Hbar is the certificate matrix at the solution, G stacks all
constraint gradients and G_r keeps a maximal linearly independent row
subset (the homogenizing row always retained). The full-G' top block makes
M_r rectangular with full row rank at certified solutions, so the adjoint
system is solved as min_y ||M_r' y - [grad_x; 0]|| via LSQR; the parameter
gradient is then -N'y with N the KKT-residual Jacobian with respect to the
vectorized matrices, applied matrix-free as rank-one outer products.

Two engines are provided: ``backprop_is`` reuses the solver's multipliers
and certificate; ``backprop_cift`` recomputes multipliers over the
independent constraint subset and solves the square reduced system. A
central finite-difference oracle over an explicit scalar parameterization
closes the loop for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .certify import TIGHT_CERTIFIED, TIGHT_UNCERTIFIED, certify
from .errors import (IterationLimit, LSQRDiverged, MultiplierResidualTooLarge,
                     NotStationary, TightnessLost)
from .linalg import LinearOperator, lsqr_solve, select_independent_rows
from .qcqp import HomQCQP, certificate_matrix, constraint_gradients
from .sdp import build_shor_relaxation, solve_sdp

DEFAULT_STAT_TOL = 1e-6


class TightnessLostUnderPerturbation(TightnessLost):
    """A finite-difference probe left the set of tight instances."""


@dataclass
class GradientReport:
    """Gradient of a scalar loss with respect to the input matrices.

    All matrices are exactly symmetric. ``as_vector`` lays them out as the
    full column-major vectorization [vec(dQ); vec(dA_1); ...; vec(dA_m)].
    """

    grad_Q: np.ndarray
    grad_A: list
    method: str
    lsqr_iters: int
    lsqr_residual: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.grad_Q.flatten(order="F")]
                              + [a.flatten(order="F") for a in self.grad_A])

    def chain_to_params(self, q: HomQCQP) -> np.ndarray:
        """Contract against the problem's parameter sensitivity directions."""
        out = []
        for k in q.param_indices():
            g = float(np.tensordot(self.grad_Q, q.cost.sensitivity_dense(k)))
            for ga, a in zip(self.grad_A, q.constraints):
                if k in a.param_sensitivity:
                    g += float(np.tensordot(ga, a.sensitivity_dense(k)))
            out.append(g)
        return np.array(out)


@dataclass
class KKTWorkspace:
    """Cached KKT data at one certified solution, shared by backprops."""

    hbar: np.ndarray
    G: np.ndarray
    independent_rows: np.ndarray
    x: np.ndarray
    lam: np.ndarray

    @property
    def lam_prime(self) -> np.ndarray:
        """Multipliers with the homogenizing one removed."""
        return self.lam[:-1]

    @property
    def n(self) -> int:
        return self.x.size

    def g_reduced(self) -> np.ndarray:
        return self.G[self.independent_rows]

    def m_r_dense(self, fully_reduced: bool = False) -> np.ndarray:
        gr = self.g_reduced()
        top_right = gr.T if fully_reduced else self.G.T
        top = np.hstack([self.hbar, top_right])
        bottom = np.hstack([gr, np.zeros((gr.shape[0], top_right.shape[1]))])
        return 2.0 * np.vstack([top, bottom])


def kkt_workspace(q: HomQCQP, x: np.ndarray, lam: np.ndarray,
                  stat_tol: float = DEFAULT_STAT_TOL,
                  row_tol: float | None = None) -> KKTWorkspace:
    """Build the workspace; fails if (x, lam) is not stationary."""
    hbar = certificate_matrix(q, lam).to_dense()
    stat = np.linalg.norm(hbar @ x)
    if stat > stat_tol * (1.0 + np.linalg.norm(hbar)):
        raise NotStationary(f"||H x|| = {stat:.3e} exceeds tolerance")
    g = constraint_gradients(q, x)
    rows = select_independent_rows(g, tol=row_tol, force_keep=g.shape[0] - 1)
    return KKTWorkspace(hbar, g, rows, np.asarray(x, dtype=float),
                        np.asarray(lam, dtype=float))


def apply_n_adjoint(x: np.ndarray, lam_prime: np.ndarray, y_x: np.ndarray,
                    y_g: np.ndarray, retained: np.ndarray, y_h: float = 0.0):
    """Adjoint of the KKT-residual Jacobian in the input matrices.

    ``retained`` indexes (into 0..m-1) the non-homogenizing constraints that
    own a residual row, aligned with ``y_g``. The homogenizing residual row
    is identically zero in the parameters, so ``y_h`` never contributes.
    Returns (grad_Q, [grad_A_i]) with

        grad_Q   = sym(2 y_x x'),
        grad_A_i = sym(2 lam'_i y_x x') + [i retained] y_gi x x'.
    """
    x = np.asarray(x, dtype=float)
    y_x = np.asarray(y_x, dtype=float)
    retained = np.asarray(retained, dtype=int)
    if len(y_g) != len(retained):
        raise ValueError("y_g and retained must align")
    del y_h  # zero row of the Jacobian
    outer = np.outer(y_x, x)
    base = outer + outer.T  # sym(2 y_x x')
    xxt = np.outer(x, x)
    grad_q = base
    grad_a = [lp * base for lp in lam_prime]
    for val, i in zip(y_g, retained):
        grad_a[i] = grad_a[i] + val * xxt
    return grad_q, grad_a


def _mr_transpose_operator(ws: KKTWorkspace, fully_reduced: bool) -> LinearOperator:
    hbar, g = ws.hbar, ws.G
    gr = ws.g_reduced()
    n = ws.n
    bottom = gr if fully_reduced else g

    def apply(y):
        y_x, y_c = y[:n], y[n:]
        return 2.0 * np.concatenate([hbar @ y_x + gr.T @ y_c, bottom @ y_x])

    def apply_adjoint(u):
        u_x, u_c = u[:n], u[n:]
        return 2.0 * np.concatenate([hbar @ u_x + bottom.T @ u_c, gr @ u_x])

    rows = n + bottom.shape[0]
    cols = n + gr.shape[0]
    return LinearOperator(rows, cols, apply, apply_adjoint)


def _solve_adjoint_system(ws, incoming, fully_reduced, atol, btol, max_iter):
    n = ws.n
    m_plus_1 = ws.G.shape[0]
    op = _mr_transpose_operator(ws, fully_reduced)
    pad = len(ws.independent_rows) if fully_reduced else m_plus_1
    rhs = np.concatenate([np.asarray(incoming, dtype=float), np.zeros(pad)])
    if max_iter is None:
        max_iter = 10 * (n + m_plus_1 - 1)
    try:
        y, iters, resid = lsqr_solve(op, rhs, atol=atol, btol=btol,
                                     max_iter=max_iter, return_info=True)
    except IterationLimit as exc:
        raise LSQRDiverged(str(exc)) from exc
    return y, iters, resid


def _report_from_y(ws, y, method, iters, resid):
    n = ws.n
    y_x = y[:n]
    y_c = y[n:]
    # independent_rows is sorted and always ends with the homogenizing row.
    retained = ws.independent_rows[:-1]
    y_g = y_c[:-1]
    grad_q, grad_a = apply_n_adjoint(ws.x, ws.lam_prime, y_x, y_g, retained,
                                     y_h=y_c[-1])
    grad_q = -grad_q
    grad_a = [-a for a in grad_a]
    return GradientReport(grad_q, grad_a, method, iters, resid)


def backprop_is(ws: KKTWorkspace, incoming: np.ndarray,
                atol: float = 1e-10, btol: float = 1e-10,
                max_iter: int | None = None,
                fully_reduced_kkt: bool = False) -> GradientReport:
    """Backward pass reusing the solver's multipliers and certificate.

    ``fully_reduced_kkt`` swaps the rectangular system (full G' in the top
    block) for the square variant restricted to the independent rows; the
    two agree on tight instances and the flag exists for A/B comparison.
    """
    incoming = np.asarray(incoming, dtype=float)
    if incoming.shape != (ws.n,):
        raise ValueError(f"incoming gradient has shape {incoming.shape}, "
                         f"expected ({ws.n},)")
    y, iters, resid = _solve_adjoint_system(ws, incoming, fully_reduced_kkt,
                                            atol, btol, max_iter)
    return _report_from_y(ws, y, "is", iters, resid)


def backprop_cift(q: HomQCQP, x: np.ndarray, incoming: np.ndarray,
                  stat_tol: float = DEFAULT_STAT_TOL,
                  row_tol: float | None = None,
                  atol: float = 1e-10, btol: float = 1e-10,
                  max_iter: int | None = None) -> GradientReport:
    """Backward pass that recomputes multipliers over independent constraints.

    The multipliers solve the stationarity least-squares G_r' lam = -Q x;
    constraints outside the independent subset get zero multipliers and zero
    gradient blocks. The square reduced KKT system is then solved with LSQR.
    """
    x = np.asarray(x, dtype=float)
    incoming = np.asarray(incoming, dtype=float)
    g = constraint_gradients(q, x)
    rows = select_independent_rows(g, tol=row_tol, force_keep=g.shape[0] - 1)
    gr = g[rows]
    qx = q.cost.matvec(x)
    lam_r, *_ = np.linalg.lstsq(gr.T, -qx, rcond=None)
    lam = np.zeros(q.m + 1)
    lam[rows] = lam_r
    hr = certificate_matrix(q, lam).to_dense()
    stat = np.linalg.norm(hr @ x)
    if stat > stat_tol * (1.0 + np.linalg.norm(hr)):
        raise MultiplierResidualTooLarge(
            f"||H_r x|| = {stat:.3e}; extraction or row selection is off")
    ws = KKTWorkspace(hr, g, rows, x, lam)
    y, iters, resid = _solve_adjoint_system(ws, incoming, True, atol, btol,
                                            max_iter)
    return _report_from_y(ws, y, "cift", iters, resid)


def solve_certified(q: HomQCQP, tol: float = 1e-10,
                    ratio_threshold: float = 1e5, max_iter: int = 100,
                    allow_uncertified: bool = False):
    """Forward pipeline: relax, solve, extract, certify.

    Returns (CertifiedSolution, SDPPrimalDual); raises TightnessLost when
    the result is not a certified rank-1 solution. ``allow_uncertified``
    accepts a rank-1 solution whose certificate checks are marginal (this
    happens transiently when an outer loop drives the problem through a
    configuration with two global minimizers); extraction failure still
    raises.
    """
    prob = build_shor_relaxation(q)
    sol = solve_sdp(prob, tol=tol, max_iter=max_iter)
    cert = certify(q, sol, ratio_threshold=ratio_threshold,
                   require_optimal=not allow_uncertified)
    acceptable = (TIGHT_CERTIFIED,) if not allow_uncertified \
        else (TIGHT_CERTIFIED, TIGHT_UNCERTIFIED)
    if cert.verdict not in acceptable:
        raise TightnessLost(
            f"verdict {cert.verdict} (ratio {cert.tightness_ratio:.3e}, "
            f"solver status {sol.status})",
            detail={"verdict": cert.verdict, "status": sol.status})
    return cert, sol


def fd_jacobian_oracle(param_map, theta: np.ndarray, h: float = 1e-5,
                       solve=None, output=None, solve_tol: float = 1e-10,
                       ratio_threshold: float = 1e5) -> np.ndarray:
    """Central-difference Jacobian of the certified solution in theta.

    ``param_map`` maps a parameter vector to a HomQCQP; ``solve`` may replace
    the default pipeline (it must map a HomQCQP to the solution vector), and
    ``output`` post-maps the solution to the quantity being differentiated.
    Steps are scaled per coordinate as h * (1 + |theta_k|). Any probe that
    fails certification aborts with the offending perturbation identified.
    """
    theta = np.asarray(theta, dtype=float)

    def default_solve(q):
        cert, _ = solve_certified(q, tol=solve_tol,
                                  ratio_threshold=ratio_threshold)
        return cert.x

    solve = solve or default_solve
    output = output or (lambda x: x)
    cols = []
    for k in range(theta.size):
        hk = h * (1.0 + abs(theta[k]))
        vals = {}
        for sign in (+1.0, -1.0):
            pert = theta.copy()
            pert[k] += sign * hk
            try:
                vals[sign] = output(solve(param_map(pert)))
            except TightnessLost as exc:
                raise TightnessLostUnderPerturbation(
                    f"perturbation theta[{k}] {sign:+.0f}*{hk:.2e} broke "
                    f"tightness: {exc}",
                    detail={"index": k, "sign": sign, "step": hk}) from exc
        cols.append((vals[1.0] - vals[-1.0]) / (2.0 * hk))
    return np.column_stack(cols)
