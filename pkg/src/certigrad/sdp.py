"""Shor relaxation of a HomQCQP and a dense primal-dual interior-point solver.

The relaxation of
    min x'Qx  s.t. x'A_i x = 0, x'A0 x = 1
is
    min <Q,X>  s.t. <A_i,X> = 0, <A0,X> = 1, X >= 0 (psd),
obtained by dropping the rank-1 condition on X = xx'.

The solver is a Nesterov-Todd scaled path-following method with Mehrotra
predictor-corrector steps and a dense Cholesky of the Schur complement. It
targets small dense problems at high accuracy (default relative tolerance
1e-10). Exactly dependent equality constraints are detected and dropped up
front; their multipliers are restored as zero so the returned multiplier
vector always has one entry per original constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, InconsistentConstraints
from .linalg import select_independent_rows, smat, svec
from .qcqp import HomQCQP

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class ShorSDP:
    """Equality-constrained SDP data; the homogenizing constraint is last."""

    n: int
    cost: np.ndarray
    constraints: tuple          # m+1 symmetric matrices
    rhs: np.ndarray             # zeros except the final homogenizing 1

    def __post_init__(self):
        if self.cost.shape != (self.n, self.n):
            raise DimensionMismatch("cost shape does not match n")
        for a in self.constraints:
            if a.shape != (self.n, self.n):
                raise DimensionMismatch("constraint shape does not match n")
        if len(self.rhs) != len(self.constraints):
            raise DimensionMismatch("rhs length does not match constraint count")


def build_shor_relaxation(q: HomQCQP) -> ShorSDP:
    """One-to-one lift of the QCQP data into SDP form."""
    mats = tuple(q.constraint_dense())
    rhs = np.zeros(q.m + 1)
    rhs[-1] = 1.0
    return ShorSDP(q.n, q.cost.to_dense(), mats, rhs)


@dataclass
class SDPPrimalDual:
    """Primal-dual bundle for a Shor SDP.

    ``lam`` is ordered (lam_1..lam_m, lam_home) and relates to the usual dual
    variable y by lam = -y, so that H = C + sum_i lam_i A_i is the dual slack.
    H is always recomputed from ``lam``, never trusted from a backend.
    Residuals are absolute: primal ||A(X)-b||, dual max(0, -eig_min(H)),
    gap <C,X> + b'lam (signed).
    """

    X: np.ndarray
    lam: np.ndarray
    H: np.ndarray
    status: str
    primal_infeas: float
    dual_infeas: float
    gap: float
    objective: float
    iterations: int = 0
    message: str = ""

    @property
    def residuals(self):
        return (self.primal_infeas, self.dual_infeas, self.gap)


def _classify(sdp: ShorSDP, X, lam, check_tol):
    """Uniform residuals + status for internal and injected solutions."""
    A = sdp.constraints
    b = sdp.rhs
    ax = np.array([float(np.tensordot(a, X)) for a in A])
    primal_infeas = float(np.linalg.norm(ax - b))
    H = sdp.cost + sum(li * a for li, a in zip(lam, A))
    H = 0.5 * (H + H.T)
    eig_h = np.linalg.eigvalsh(H)
    dual_infeas = float(max(0.0, -eig_h[0]))
    obj = float(np.tensordot(sdp.cost, X))
    gap = obj + float(b @ lam)
    eig_x = np.linalg.eigvalsh(X)
    xnorm2 = max(abs(eig_x[0]), abs(eig_x[-1]))
    comp = float(np.tensordot(H, X))
    ok = (primal_infeas <= check_tol * (1.0 + np.linalg.norm(b))
          and dual_infeas <= check_tol * (1.0 + np.linalg.norm(sdp.cost))
          and abs(gap) <= check_tol * (1.0 + abs(obj))
          and eig_x[0] >= -check_tol * max(1.0, xnorm2)
          and abs(comp) <= 100.0 * check_tol
          * (1.0 + np.linalg.norm(X) * np.linalg.norm(H)))
    return H, primal_infeas, dual_infeas, gap, obj, ok


def _drop_dependent(constraints, rhs, tol=1e-10):
    """Indices of a maximal independent constraint subset (homogenizing kept).

    Dependent rows must be consistent with the kept ones; otherwise the
    problem is infeasible by construction and we refuse to solve it.
    """
    stack = np.vstack([svec(a) for a in constraints])
    keep = select_independent_rows(
        stack, tol=tol * max(np.linalg.norm(stack, 2), 1.0),
        force_keep=len(constraints) - 1)
    dropped = [i for i in range(len(constraints)) if i not in set(keep.tolist())]
    if dropped:
        basis = stack[keep].T
        for i in dropped:
            coeff, *_ = np.linalg.lstsq(basis, stack[i], rcond=None)
            if abs(rhs[i] - coeff @ rhs[keep]) > 1e-6 * (1.0 + np.linalg.norm(rhs)):
                raise InconsistentConstraints(
                    f"constraint {i} is dependent with contradictory rhs")
    return keep, dropped


def _safe_chol(a, name):
    jitter = 0.0
    scale = max(float(np.trace(a)) / a.shape[0], 1e-300)
    for attempt in range(4):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
        except np.linalg.LinAlgError:
            jitter = scale * 10.0 ** (-14 + 2 * attempt)
    raise np.linalg.LinAlgError(f"cholesky of {name} failed")


def _max_step(chol_l, d):
    """Largest alpha with M + alpha*D psd, given M = L L'."""
    w = scipy.linalg.solve_triangular(chol_l, d, lower=True, check_finite=False)
    m = scipy.linalg.solve_triangular(chol_l, w.T, lower=True, check_finite=False)
    emin = np.linalg.eigvalsh(0.5 * (m + m.T))[0]
    if emin >= -1e-14:
        return np.inf
    return -1.0 / emin


@dataclass
class IPMResult:
    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    iterations: int
    converged: bool
    message: str = ""


def ipm_solve(C, constraints, b, tol=1e-10, max_iter=100,
              step_fraction=0.98) -> IPMResult:
    """Path-following solve of min <C,X> s.t. <A_i,X> = b_i, X psd.

    Constraint matrices must be linearly independent (see _drop_dependent).
    Cost and right-hand side are normalized internally (the iterates are
    scaled back on return), so accuracy is relative to the data scale.
    Returns the final iterate whether or not the tolerance was met;
    ``converged`` reflects the solver's own relative residual tests.
    """
    C = 0.5 * (C + C.T)
    n = C.shape[0]
    p = len(constraints)
    if p == 0:
        raise DimensionMismatch("at least one equality constraint is required")
    A = [0.5 * (a + a.T) for a in constraints]
    Avec = np.vstack([a.ravel() for a in A])
    b = np.asarray(b, dtype=float)
    # Iterate on normalized data (conditioning, sane cold start); residual
    # tests below are still taken in the caller's units.
    scale_c = max(1.0, float(np.linalg.norm(C)))
    scale_b = max(1.0, float(np.linalg.norm(b)))
    bnorm_orig = float(np.linalg.norm(b))
    cnorm_orig = float(np.linalg.norm(C))
    scale = scale_b * scale_c
    C = C / scale_c
    b = b / scale_b

    def a_of(x_mat):
        return Avec @ x_mat.ravel()

    def a_star(y_vec):
        return (Avec.T @ y_vec).reshape(n, n)

    def frob(a_mat, b_mat):
        return float(a_mat.ravel() @ b_mat.ravel())

    tau = 1.0 + np.linalg.norm(C)
    X = tau * np.eye(n)
    Z = tau * np.eye(n)
    y = np.zeros(p)
    eye = np.eye(n)

    converged = False
    message = ""
    it = 0
    stalls = 0
    best = (np.inf, X, y, Z)
    no_progress = 0
    for it in range(1, max_iter + 1):
        rp = b - a_of(X)
        Rd = C - Z - a_star(y)
        obj_p = frob(C, X)
        obj_d = float(b @ y)
        mu = frob(X, Z) / n

        rel_p = scale_b * np.linalg.norm(rp) / (1.0 + bnorm_orig)
        rel_d = scale_c * np.linalg.norm(Rd) / (1.0 + cnorm_orig)
        denom_gap = 1.0 + scale * (abs(obj_p) + abs(obj_d))
        rel_gap = scale * abs(obj_p - obj_d) / denom_gap
        rel_mu = scale * n * mu / denom_gap
        score = max(rel_p, rel_d, rel_gap, rel_mu)
        if score < best[0]:
            best = (score, X, y, Z)
            no_progress = 0
        else:
            # float64 accuracy floor reached; keep the best iterate
            no_progress += 1
            if no_progress >= 8:
                message = "residuals stopped improving"
                break
        if rel_p <= tol and rel_d <= tol and rel_gap <= tol and rel_mu <= tol:
            converged = True
            break

        if np.trace(X) > 1e12 * n * tau or np.linalg.norm(y) > 1e12 * (1.0 + np.linalg.norm(C)):
            message = "iterates diverged; problem may be infeasible or unbounded"
            break

        try:
            Lx = _safe_chol(X, "X")
            Lz = _safe_chol(Z, "Z")
            # Nesterov-Todd scaling factor r with r'Zr = r^-1 X r^-T = diag(s).
            u_svd, s, vt = np.linalg.svd(Lz.T @ Lx)
            if s[-1] <= 0:
                message = "scaling point collapsed"
                break
            sq = np.sqrt(s)
            r_f = Lx @ vt.T / sq
            r_inv = (u_svd / sq).T @ Lz.T
            W = r_f @ r_f.T

            # Schur complement S_ij = <A_i, W A_j W>
            Tvec = np.vstack([(W @ a @ W).ravel() for a in A])
            S = Avec @ Tvec.T
            S = 0.5 * (S + S.T)
            try:
                cho = scipy.linalg.cho_factor(S, check_finite=False)
            except scipy.linalg.LinAlgError:
                cho = scipy.linalg.cho_factor(
                    S + 1e-13 * np.trace(S) / p * np.eye(p), check_finite=False)

            def solve_schur(rhs_vec):
                # two rounds of iterative refinement fight the 1/mu^2
                # conditioning of S near convergence
                sol = scipy.linalg.cho_solve(cho, rhs_vec, check_finite=False)
                for _ in range(2):
                    sol = sol + scipy.linalg.cho_solve(cho, rhs_vec - S @ sol,
                                                       check_finite=False)
                return sol

            WRdW = W @ Rd @ W

            lam_s = s  # scaled point: r^-1 X r^-T = r' Z r = diag(lam_s)
            denom = 0.5 * (lam_s[:, None] + lam_s[None, :])

            def newton(rc_mat):
                f = rc_mat / denom
                rfr = r_f @ f @ r_f.T
                rhs_y = rp - a_of(rfr) + a_of(WRdW)
                dy = solve_schur(rhs_y)
                dz = Rd - a_star(dy)
                dx = rfr - W @ dz @ W
                return 0.5 * (dx + dx.T), dy, 0.5 * (dz + dz.T)

            # Predictor (affine direction)
            rc_aff = np.diag(-lam_s ** 2)
            dx_a, dy_a, dz_a = newton(rc_aff)
            ap = min(1.0, _max_step(Lx, dx_a))
            ad = min(1.0, _max_step(Lz, dz_a))
            mu_aff = frob(X + ap * dx_a, Z + ad * dz_a) / n
            sigma = min(1.0, max((mu_aff / mu) ** 3, 1e-10)) if mu > 0 else 0.0

            # Corrector with Mehrotra second-order term in the scaled space
            dxs = r_inv @ dx_a @ r_inv.T
            dzs = r_f.T @ dz_a @ r_f
            cross = dxs @ dzs
            rc = sigma * mu * eye + rc_aff - 0.5 * (cross + cross.T)
            dx, dy, dz = newton(rc)

            ap = min(1.0, step_fraction * _max_step(Lx, dx))
            ad = min(1.0, step_fraction * _max_step(Lz, dz))
        except np.linalg.LinAlgError as exc:
            message = str(exc)
            break

        if max(ap, ad) < 1e-8:
            stalls += 1
            if stalls >= 2:
                message = "step length collapsed"
                break
        else:
            stalls = 0

        X = X + ap * dx
        y = y + ad * dy
        Z = Z + ad * dz
        X = 0.5 * (X + X.T)
        Z = 0.5 * (Z + Z.T)

    if not converged and not message and it >= max_iter:
        message = f"iteration limit {max_iter} reached"
    if not converged and best[0] < np.inf:
        # final residual check on the best iterate seen
        X, y, Z = best[1], best[2], best[3]
        obj_p = frob(C, X)
        obj_d = float(b @ y)
        denom_gap = 1.0 + scale * (abs(obj_p) + abs(obj_d))
        rel_p = scale_b * np.linalg.norm(b - a_of(X)) / (1.0 + bnorm_orig)
        rel_d = scale_c * np.linalg.norm(C - Z - a_star(y)) / (1.0 + cnorm_orig)
        rel_gap = scale * abs(obj_p - obj_d) / denom_gap
        rel_mu = scale * frob(X, Z) / denom_gap
        converged = (rel_p <= tol and rel_d <= tol and rel_gap <= tol
                     and rel_mu <= tol)

    # Minimum-norm projection onto the affine constraints clears the primal
    # drift left by ill-conditioned late Schur systems; the correction is of
    # the order of that drift, far below the psd slack of the iterate.
    try:
        stack = np.vstack([svec(a) for a in A])
        gram = scipy.linalg.cho_factor(stack @ stack.T, check_finite=False)
        resid = b - a_of(X)
        X = X + smat(stack.T @ scipy.linalg.cho_solve(gram, resid,
                                                      check_finite=False), n)
    except scipy.linalg.LinAlgError:
        pass
    return IPMResult(scale_b * X, scale_c * y, scale_c * Z, it, converged,
                     message)


def solve_sdp(sdp: ShorSDP, tol: float = 1e-10, max_iter: int = 100) -> SDPPrimalDual:
    """Solve the relaxation; never silently returns an infeasible X.

    Status is assigned purely from recomputed residuals, so an injected
    solution of the same quality classifies identically.
    """
    keep, dropped = _drop_dependent(sdp.constraints, sdp.rhs)
    sub = [sdp.constraints[i] for i in keep]
    res = ipm_solve(sdp.cost, sub, sdp.rhs[keep], tol=tol, max_iter=max_iter)

    lam = np.zeros(len(sdp.constraints))
    lam[keep] = -res.y
    check_tol = max(tol, 1e-9)
    H, pinf, dinf, gap, obj, ok = _classify(sdp, res.X, lam, check_tol)
    if ok:
        status = OPTIMAL
    elif res.message and "limit" in res.message:
        status = MAX_ITER
    elif not res.converged:
        status = NUMERICAL_FAILURE
    else:
        status = NUMERICAL_FAILURE
    return SDPPrimalDual(res.X, lam, H, status, pinf, dinf, gap, obj,
                         iterations=res.iterations, message=res.message)


def inject_external_solution(sdp: ShorSDP, X: np.ndarray,
                             lam: np.ndarray, tol: float = 1e-9) -> SDPPrimalDual:
    """Wrap an externally computed primal-dual pair in the solver's bundle.

    H and all residuals are recomputed here; downstream code treats the
    result exactly like an internal solve.
    """
    X = np.asarray(X, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if X.shape != (sdp.n, sdp.n):
        raise DimensionMismatch(f"X has shape {X.shape}, expected {(sdp.n, sdp.n)}")
    if lam.shape != (len(sdp.constraints),):
        raise DimensionMismatch(
            f"lambda has length {lam.size}, expected {len(sdp.constraints)}")
    X = 0.5 * (X + X.T)
    H, pinf, dinf, gap, obj, ok = _classify(sdp, X, lam, max(tol, 1e-9))
    status = OPTIMAL if ok else NUMERICAL_FAILURE
    return SDPPrimalDual(X, lam, H, status, pinf, dinf, gap, obj,
                         message="" if ok else "injected solution failed residual checks")
