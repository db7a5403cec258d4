"""Dense/sparse symmetric linear algebra kernels.

Matrix-free linear operators with explicit adjoints, an LSQR least-squares
solver (Paige & Saunders), rank-revealing row selection, and a thin
symmetric-eigendecomposition wrapper. Everything here is pure and
stateless, so calls are safe from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import DegenerateInput, DimensionMismatch, IterationLimit

_EPS = np.finfo(float).eps


class LinearOperator:
    """Linear map given by its action and the action of its adjoint.

    ``apply`` maps R^cols -> R^rows and ``apply_adjoint`` maps
    R^rows -> R^cols; the pair must satisfy <apply(u), v> = <u, apply_adjoint(v)>.
    """

    def __init__(self, rows: int, cols: int,
                 apply: Callable[[np.ndarray], np.ndarray],
                 apply_adjoint: Callable[[np.ndarray], np.ndarray]):
        self.rows = int(rows)
        self.cols = int(cols)
        self._apply = apply
        self._apply_adjoint = apply_adjoint

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.cols,):
            raise DimensionMismatch(
                f"operator is {self.rows}x{self.cols}, got input of shape {u.shape}")
        return self._apply(u)

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.rows,):
            raise DimensionMismatch(
                f"operator is {self.rows}x{self.cols}, got adjoint input of shape {v.shape}")
        return self._apply_adjoint(v)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "LinearOperator":
        a = np.asarray(a, dtype=float)
        return cls(a.shape[0], a.shape[1], lambda u: a @ u, lambda v: a.T @ v)

    def to_dense(self) -> np.ndarray:
        cols = [self.apply(e) for e in np.eye(self.cols)]
        return np.column_stack(cols) if cols else np.zeros((self.rows, 0))


@dataclass
class EigDecomp:
    """Symmetric eigendecomposition with eigenvalues sorted descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # orthonormal columns, aligned with eigenvalues

    def reconstruct(self) -> np.ndarray:
        v, lam = self.eigenvectors, self.eigenvalues
        return (v * lam) @ v.T


def eigh_sorted(s: np.ndarray) -> EigDecomp:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {s.shape}")
    lam, v = np.linalg.eigh(0.5 * (s + s.T))
    return EigDecomp(lam[::-1].copy(), v[:, ::-1].copy())


def _sym_ortho(a: float, b: float):
    # Stable Givens rotation, as in the original LSQR reference code.
    if b == 0.0:
        return np.sign(a) if a != 0 else 1.0, 0.0, abs(a)
    if a == 0.0:
        return 0.0, np.sign(b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = np.sign(b) / np.sqrt(1.0 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = np.sign(a) / np.sqrt(1.0 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def lsqr_solve(op: LinearOperator, rhs: np.ndarray, atol: float = 1e-10,
               btol: float = 1e-10, max_iter: int | None = None,
               damp: float = 0.0, return_info: bool = False):
    """Least-squares solve min_y ||op y - rhs||_2 by the LSQR bidiagonalization.

    Returns the minimum-norm minimizer (up to the iterative tolerance) when
    the minimizer is not unique. Stopping follows the Paige-Saunders rules:
    converged when the residual is small relative to the data (test 1) or the
    normal-equations residual is small relative to ||A|| ||r|| (test 2).

    Raises IterationLimit (carrying the last iterate) if ``max_iter`` is
    reached with neither test satisfied. With ``return_info`` the result is
    ``(y, iterations, normal_eq_residual)``.
    """
    if atol <= 0 or btol <= 0:
        raise ValueError("atol and btol must be positive")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.rows,):
        raise DimensionMismatch(
            f"rhs has shape {rhs.shape}, operator is {op.rows}x{op.cols}")
    m, n = op.rows, op.cols
    if max_iter is None:
        max_iter = 4 * n

    x = np.zeros(n)
    u = rhs.copy()
    bnorm = np.linalg.norm(u)
    if bnorm == 0.0:
        return (x, 0, 0.0) if return_info else x
    beta = bnorm
    u /= beta
    v = op.apply_adjoint(u)
    alfa = np.linalg.norm(v)
    if alfa > 0:
        v = v / alfa
    w = v.copy()

    rhobar = alfa
    phibar = beta
    anorm = 0.0
    ddnorm = 0.0
    res2 = 0.0
    xxnorm = 0.0
    z = 0.0
    cs2 = -1.0
    sn2 = 0.0
    dampsq = damp * damp
    arnorm = alfa * beta
    rnorm = beta
    if arnorm == 0.0:
        # rhs is orthogonal to the range; zero is the minimizer.
        return (x, 0, 0.0) if return_info else x

    itn = 0
    converged = False
    while itn < max_iter:
        itn += 1
        u = op.apply(v) - alfa * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u /= beta
            anorm = np.sqrt(anorm ** 2 + alfa ** 2 + beta ** 2 + dampsq)
            v = op.apply_adjoint(u) - beta * v
            alfa = np.linalg.norm(v)
            if alfa > 0:
                v = v / alfa

        if damp > 0:
            rhobar1 = np.sqrt(rhobar ** 2 + dampsq)
            cs1 = rhobar / rhobar1
            sn1 = damp / rhobar1
            psi = sn1 * phibar
            phibar = cs1 * phibar
        else:
            rhobar1 = rhobar
            psi = 0.0
        cs, sn, rho = _sym_ortho(rhobar1, beta)
        theta = sn * alfa
        rhobar = -cs * alfa
        phi = cs * phibar
        phibar = sn * phibar
        tau = sn * phi

        t1 = phi / rho
        t2 = -theta / rho
        dk = w / rho
        x = x + t1 * w
        w = v + t2 * w
        ddnorm += np.linalg.norm(dk) ** 2

        delta = sn2 * rho
        gambar = -cs2 * rho
        rhs_z = phi - delta * z
        zbar = rhs_z / gambar
        xnorm = np.sqrt(xxnorm + zbar ** 2)
        gamma = np.sqrt(gambar ** 2 + theta ** 2)
        cs2 = gambar / gamma
        sn2 = theta / gamma
        z = rhs_z / gamma
        xxnorm += z ** 2

        res1 = phibar ** 2
        res2 = res2 + psi ** 2
        rnorm = np.sqrt(res1 + res2)
        arnorm = alfa * abs(tau)

        test1 = rnorm / bnorm
        test2 = arnorm / (anorm * rnorm + _EPS)
        t1s = test1 / (1.0 + anorm * xnorm / bnorm)
        rtol = btol + atol * anorm * xnorm / bnorm

        if 1.0 + test2 <= 1.0 or 1.0 + t1s <= 1.0:
            converged = True
        if test2 <= atol or test1 <= rtol:
            converged = True
        if converged:
            break

    if not converged:
        raise IterationLimit(
            f"LSQR reached max_iter={max_iter} (||A'r|| = {arnorm:.3e})",
            x=x, residual=arnorm, iterations=itn)
    if return_info:
        return x, itn, arnorm
    return x


def svec(a: np.ndarray) -> np.ndarray:
    """Half-vectorization with sqrt(2)-scaled off-diagonals.

    Isometric for the Frobenius inner product: svec(A) @ svec(B) = <A, B>.
    Order is row-major over the upper triangle.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    iu = np.triu_indices(n)
    scale = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return a[iu] * scale


def smat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of svec."""
    v = np.asarray(v, dtype=float)
    if v.size != n * (n + 1) // 2:
        raise DimensionMismatch(f"svec length {v.size} does not match dim {n}")
    iu = np.triu_indices(n)
    scale = np.where(iu[0] == iu[1], 1.0, 1.0 / np.sqrt(2.0))
    a = np.zeros((n, n))
    a[iu] = v * scale
    return a + np.triu(a, 1).T


def _pivoted_rank(work: np.ndarray, tol: float) -> int:
    if work.shape[0] == 0:
        return 0
    r = scipy.linalg.qr(work.T, mode="r", pivoting=True)[0]
    rdiag = np.abs(np.diag(r)) if r.size else np.array([])
    return int(np.sum(rdiag > tol))


def select_independent_rows(g: np.ndarray, tol: float | None = None,
                            force_keep: int | None = None) -> np.ndarray:
    """Indices of a maximal linearly independent row subset of ``g``.

    The rank is revealed by column-pivoted QR on g^T at tolerance ``tol``
    (default 1e-8 * ||g||_2); rows are then taken greedily in index order up
    to that rank, so earlier rows win ties. ``force_keep`` names a row that
    must be retained (it is deflated out first); its inclusion never lowers
    the selected rank.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if g.size == 0:
        raise DegenerateInput("empty matrix")
    gnorm = np.linalg.norm(g, 2)
    if gnorm == 0.0:
        raise DegenerateInput("all-zero matrix has no independent rows")
    if tol is None:
        tol = 1e-8 * gnorm
    if tol <= 0:
        raise ValueError("tol must be positive")

    keep = []
    basis = []  # orthonormal rows spanning the kept set

    def try_add(idx):
        r = g[idx].copy()
        for q in basis:  # re-orthogonalize twice for accuracy
            r -= (r @ q) * q
        for q in basis:
            r -= (r @ q) * q
        rn = np.linalg.norm(r)
        if rn > tol:
            basis.append(r / rn)
            keep.append(idx)
            return True
        return False

    if force_keep is not None:
        if np.linalg.norm(g[force_keep]) <= tol:
            raise DegenerateInput("forced row is numerically zero")
        try_add(force_keep)
        rest = np.delete(g, force_keep, axis=0)
        q0 = basis[0]
        target = 1 + _pivoted_rank(rest - np.outer(rest @ q0, q0), tol)
    else:
        target = _pivoted_rank(g, tol)

    for idx in range(g.shape[0]):
        if len(keep) >= target:
            break
        if idx != force_keep:
            try_add(idx)

    return np.array(sorted(keep), dtype=int)
