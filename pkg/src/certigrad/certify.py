"""Rank-1 extraction, tightness and certificate tests, suboptimality gap.

A relaxation solution X is accepted as rank-1 when the ratio of its two
largest eigenvalues clears a threshold (1e5 by default). The certificate
matrix H must then be positive semidefinite with H x = 0 and a one-
dimensional kernel for the solution to count as certified; the corank-1
test doubles as a practical second-order sufficiency check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateObjective, DimensionMismatch,
                     HomogeneousEntryZero)
from .linalg import eigh_sorted, select_independent_rows
from .qcqp import (HomQCQP, certificate_matrix, constraint_gradients,
                   eval_objective_and_residuals)
from .sdp import OPTIMAL, SDPPrimalDual

TIGHT_CERTIFIED = "tight_certified"
TIGHT_UNCERTIFIED = "tight_uncertified"
NOT_TIGHT = "not_tight"

DEFAULT_RATIO_THRESHOLD = 1e5
DEFAULT_PSD_TOL = 1e-7
DEFAULT_STAT_TOL = 1e-6
DEFAULT_CORANK_GAP = 1e-6


@dataclass
class CertifiedSolution:
    """Extraction + certification summary for one relaxation solution.

    ``x`` is sign-normalized so its homogeneous entry equals +1 exactly; it
    is None when the relaxation was not tight. ``X`` carries the relaxation
    matrix for the rounding recourse path. ``lam`` holds the multipliers the
    certificate was evaluated with (the solver's, plus the least-squares
    stationarity correction when polishing is on).
    """

    x: np.ndarray | None
    tightness_ratio: float
    certificate_min_eig: float
    certificate_second_eig: float
    stationarity_residual: float
    verdict: str
    X: np.ndarray = None
    lam: np.ndarray = None

    @property
    def is_certified(self) -> bool:
        return self.verdict == TIGHT_CERTIFIED


@dataclass
class CertificateFlags:
    psd_ok: bool
    stationarity_ok: bool
    corank1_ok: bool

    def all_ok(self) -> bool:
        return self.psd_ok and self.stationarity_ok and self.corank1_ok


def tightness_ratio(X: np.ndarray) -> float:
    """Ratio of the two largest eigenvalues; +inf when the second vanishes."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] < 2:
        raise DimensionMismatch(f"need a square matrix of dim >= 2, got {X.shape}")
    lam = eigh_sorted(X).eigenvalues
    if lam[1] <= 1e-300:
        return np.inf
    return float(lam[0] / lam[1])


def extract_rank1(X: np.ndarray, homog_index: int,
                  ratio_threshold: float = DEFAULT_RATIO_THRESHOLD) -> CertifiedSolution:
    """Factor X ~= x x' when the eigenvalue ratio clears the threshold.

    The dominant eigenvector is scaled by sqrt(eig_max), sign-flipped so the
    homogeneous entry is positive, then rescaled to make it exactly 1.
    Below threshold, returns a NOT_TIGHT result carrying X for rounding.
    """
    X = np.asarray(X, dtype=float)
    ratio = tightness_ratio(X)
    if not (0 <= homog_index < X.shape[0]):
        raise DimensionMismatch(f"homog_index {homog_index} outside dim {X.shape[0]}")
    if ratio < ratio_threshold:
        return CertifiedSolution(None, ratio, np.nan, np.nan, np.nan,
                                 NOT_TIGHT, X=X)
    dec = eigh_sorted(X)
    x = np.sqrt(max(dec.eigenvalues[0], 0.0)) * dec.eigenvectors[:, 0]
    if abs(x[homog_index]) < 1e-8:
        raise HomogeneousEntryZero(
            f"|x_h| = {abs(x[homog_index]):.2e} before normalization")
    x = x / x[homog_index]  # also fixes the sign
    return CertifiedSolution(x, ratio, np.nan, np.nan, np.nan,
                             TIGHT_UNCERTIFIED, X=X)


def certificate_check(H: np.ndarray, x: np.ndarray,
                      psd_tol: float = DEFAULT_PSD_TOL,
                      stat_tol: float = DEFAULT_STAT_TOL,
                      corank_gap: float = DEFAULT_CORANK_GAP) -> CertificateFlags:
    """PSD / stationarity / corank-1 tests on the certificate matrix."""
    H = np.asarray(H, dtype=float)
    x = np.asarray(x, dtype=float)
    if H.shape != (x.size, x.size):
        raise DimensionMismatch(f"H is {H.shape}, x has length {x.size}")
    eigs = np.linalg.eigvalsh(0.5 * (H + H.T))
    hnorm2 = max(abs(eigs[0]), abs(eigs[-1]))
    psd_ok = eigs[0] >= -psd_tol * (1.0 + hnorm2)
    stationarity_ok = (np.linalg.norm(H @ x)
                       <= stat_tol * (1.0 + np.linalg.norm(H)))
    corank1_ok = bool(psd_ok and abs(eigs[0]) <= psd_tol * (1.0 + hnorm2)
                      and eigs[1] >= corank_gap * hnorm2)
    return CertificateFlags(bool(psd_ok), bool(stationarity_ok), corank1_ok)


def suboptimality_gap(Q: np.ndarray, x_hat: np.ndarray, X: np.ndarray) -> float:
    """Relative objective gap <Q, xx' - X> / <Q, X> of a rounded point."""
    Q = np.asarray(Q, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    X = np.asarray(X, dtype=float)
    if Q.shape != X.shape or Q.shape != (x_hat.size, x_hat.size):
        raise DimensionMismatch("Q, X, x_hat do not conform")
    denom = float(np.tensordot(Q, X))
    if abs(denom) < 1e-300:
        raise DegenerateObjective("<Q, X> = 0; relative gap undefined")
    num = float(x_hat @ Q @ x_hat) - denom
    return num / denom


def polish_solution(q: HomQCQP, x: np.ndarray, lam: np.ndarray,
                    newton_iters: int = 3):
    """Sharpen an extracted primal-dual pair to machine precision.

    An interior-point solve pins the solution only to about sqrt(mu) along
    the feasible manifold (the objective is flat to second order there), so
    extraction inherits a 1e-6..1e-8 error floor at mu ~ 1e-12. A couple of
    Newton steps on the reduced KKT system remove it. The multipliers are
    then corrected by the minimum-norm least-squares shift restoring
    stationarity; the shift leaves the homogenizing multiplier (and hence
    the duality gap) essentially untouched. Falls back to the inputs if the
    Newton residual fails to decrease.
    """
    x = np.asarray(x, dtype=float).copy()
    lam = np.asarray(lam, dtype=float).copy()
    n = x.size

    def reduced_rows(xv):
        g = constraint_gradients(q, xv)
        return g, select_independent_rows(g, force_keep=g.shape[0] - 1)

    qmat = q.cost.to_dense()
    a_mats = q.constraint_dense()
    g, rows = reduced_rows(x)
    gr = g[rows]
    lam_r, *_ = np.linalg.lstsq(gr.T, -(qmat @ x), rcond=None)

    def kkt_residual(xv, lr):
        hr = qmat + sum(li * a_mats[i] for li, i in zip(lr, rows))
        _, res = eval_objective_and_residuals(q, xv)
        return np.concatenate([hr @ xv, res[rows]]), hr

    f, hr = kkt_residual(x, lam_r)
    best = (np.linalg.norm(f), x.copy(), lam_r.copy())
    for _ in range(newton_iters):
        jac = np.block([[hr, gr.T],
                        [2.0 * gr, np.zeros((len(rows), len(rows)))]])
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        x = x + step[:n]
        lam_r = lam_r + step[n:]
        x = x / x[q.homog_index]  # keep the homogeneous entry pinned
        g = constraint_gradients(q, x)
        gr = g[rows]
        f, hr = kkt_residual(x, lam_r)
        fn = np.linalg.norm(f)
        if fn < best[0]:
            best = (fn, x.copy(), lam_r.copy())
        else:
            break
    _, x, _ = best

    # Minimum-norm multiplier correction: H(lam + d) x = Hx + G' d.
    g = constraint_gradients(q, x)
    hx = certificate_matrix(q, lam).matvec(x)
    delta, *_ = np.linalg.lstsq(g.T, -hx, rcond=None)
    return x, lam + delta


def certify(q: HomQCQP, sol: SDPPrimalDual,
            ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
            psd_tol: float = DEFAULT_PSD_TOL,
            stat_tol: float = DEFAULT_STAT_TOL,
            corank_gap: float = DEFAULT_CORANK_GAP,
            require_optimal: bool = True,
            polish: bool = True) -> CertifiedSolution:
    """Full extraction + certification of one solver bundle."""
    if require_optimal and sol.status != OPTIMAL:
        return CertifiedSolution(None, np.nan, np.nan, np.nan, np.nan,
                                 NOT_TIGHT, X=sol.X, lam=sol.lam)
    cand = extract_rank1(sol.X, q.homog_index, ratio_threshold)
    if cand.verdict == NOT_TIGHT:
        cand.lam = sol.lam
        return cand
    x, lam = cand.x, sol.lam
    if polish:
        x, lam = polish_solution(q, x, lam)
    H = certificate_matrix(q, lam).to_dense()
    flags = certificate_check(H, x, psd_tol, stat_tol, corank_gap)
    eigs = np.linalg.eigvalsh(H)
    verdict = TIGHT_CERTIFIED if flags.all_ok() else TIGHT_UNCERTIFIED
    return CertifiedSolution(x, cand.tightness_ratio,
                             float(eigs[0]), float(eigs[1]),
                             float(np.linalg.norm(H @ x)), verdict,
                             X=sol.X, lam=lam)


def feasibility_max_violation(q: HomQCQP, x: np.ndarray) -> float:
    _, res = eval_objective_and_residuals(q, x)
    return float(np.max(np.abs(res)))
