"""Parameterized homogenized QCQPs.

A problem instance is
    min_x  x' Q x   s.t.  x' A_i x = 0 (i = 1..m),  x' A0 x = 1,
where A0 = e_h e_h' pins the homogeneous coordinate x_h to +-1. Cost and
constraint matrices may carry sparse sensitivity directions with respect to
named scalar parameters. Instances are immutable after construction and all
operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DuplicateHomogenizing


def _canon_triplets(dim, triplets):
    """Canonicalize to upper-triangle (i <= j), merging duplicates by summing."""
    merged = {}
    for i, j, v in triplets:
        i, j, v = int(i), int(j), float(v)
        if not (0 <= i < dim and 0 <= j < dim):
            raise DimensionMismatch(f"triplet ({i},{j}) outside dim {dim}")
        if i > j:
            i, j = j, i
        merged[(i, j)] = merged.get((i, j), 0.0) + v
    return tuple(sorted((i, j, v) for (i, j), v in merged.items() if v != 0.0))


@dataclass(frozen=True)
class ParamSymMatrix:
    """Sparse symmetric matrix, affine in an optional scalar-parameter block.

    ``entries`` are upper-triangle triplets (i, j, value) describing the full
    symmetric matrix (the (j, i) mirror is implied, not stored).
    ``param_sensitivity`` maps a parameter index to the perturbation direction
    of this matrix per unit change of that parameter, as more triplets.
    """

    dim: int
    entries: tuple = ()
    param_sensitivity: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", _canon_triplets(self.dim, self.entries))
        sens = {int(k): _canon_triplets(self.dim, v)
                for k, v in self.param_sensitivity.items()}
        object.__setattr__(self, "param_sensitivity", sens)

    @classmethod
    def from_dense(cls, a: np.ndarray, tol: float = 0.0,
                   param_sensitivity: dict | None = None) -> "ParamSymMatrix":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"expected square matrix, got {a.shape}")
        if not np.array_equal(a, a.T):
            a = 0.5 * (a + a.T)
        n = a.shape[0]
        trips = [(i, j, a[i, j]) for i in range(n) for j in range(i, n)
                 if abs(a[i, j]) > tol]
        return cls(n, tuple(trips), param_sensitivity or {})

    def to_dense(self) -> np.ndarray:
        s = np.zeros((self.dim, self.dim))
        for i, j, v in self.entries:
            s[i, j] = v
            s[j, i] = v
        return s

    def sensitivity_dense(self, k: int) -> np.ndarray:
        d = np.zeros((self.dim, self.dim))
        for i, j, v in self.param_sensitivity.get(k, ()):
            d[i, j] = v
            d[j, i] = v
        return d

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        for i, j, v in self.entries:
            out[i] += v * x[j]
            if i != j:
                out[j] += v * x[i]
        return out

    def quad_form(self, x: np.ndarray) -> float:
        return float(x @ self.matvec(x))


def homogenizing_matrix(dim: int, h: int) -> ParamSymMatrix:
    return ParamSymMatrix(dim, ((h, h, 1.0),))


@dataclass(frozen=True)
class HomQCQP:
    """Homogenized QCQP: cost, m equality constraints, homogenizing constraint."""

    n: int
    cost: ParamSymMatrix
    constraints: tuple
    homog_index: int
    homog_constraint: ParamSymMatrix
    redundant_flags: tuple

    @property
    def m(self) -> int:
        return len(self.constraints)

    def constraint_dense(self) -> list:
        """All m+1 constraint matrices, homogenizing last."""
        return [a.to_dense() for a in self.constraints] + [self.homog_constraint.to_dense()]

    def param_indices(self) -> list:
        keys = set(self.cost.param_sensitivity)
        for a in self.constraints:
            keys |= set(a.param_sensitivity)
        return sorted(keys)


def build_hom_qcqp(cost: ParamSymMatrix, constraints, homog_index: int,
                   redundant_flags=None) -> HomQCQP:
    """Assemble a HomQCQP; the homogenizing constraint is added automatically.

    A user-supplied duplicate of the homogenizing matrix is rejected rather
    than silently doubled.
    """
    n = cost.dim
    if not (0 <= homog_index < n):
        raise DimensionMismatch(f"homog_index {homog_index} outside dim {n}")
    constraints = tuple(constraints)
    for a in constraints:
        if a.dim != n:
            raise DimensionMismatch(f"constraint dim {a.dim} != cost dim {n}")
        if a.entries == ((homog_index, homog_index, 1.0),):
            raise DuplicateHomogenizing(
                "homogenizing constraint is added automatically; do not supply it")
    if redundant_flags is None:
        redundant_flags = (False,) * len(constraints)
    redundant_flags = tuple(bool(f) for f in redundant_flags)
    if len(redundant_flags) != len(constraints):
        raise DimensionMismatch("redundant_flags length != number of constraints")
    return HomQCQP(n, cost, constraints, homog_index,
                   homogenizing_matrix(n, homog_index), redundant_flags)


def eval_objective_and_residuals(q: HomQCQP, x: np.ndarray):
    """Objective x'Qx and the m+1 constraint residuals (homogenizing last)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (q.n,):
        raise DimensionMismatch(f"x has shape {x.shape}, problem dim is {q.n}")
    obj = q.cost.quad_form(x)
    res = np.array([a.quad_form(x) for a in q.constraints]
                   + [q.homog_constraint.quad_form(x) - 1.0])
    return obj, res


def constraint_gradients(q: HomQCQP, x: np.ndarray) -> np.ndarray:
    """Stacked rows (A_i x)' for i = 1..m then the homogenizing row (A0 x)'.

    The conventional factor 2 of the gradient of x'Ax is carried by the KKT
    system assembly downstream, not here.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (q.n,):
        raise DimensionMismatch(f"x has shape {x.shape}, problem dim is {q.n}")
    rows = [a.matvec(x) for a in q.constraints] + [q.homog_constraint.matvec(x)]
    return np.vstack(rows)


def certificate_matrix(q: HomQCQP, lam: np.ndarray) -> ParamSymMatrix:
    """Certificate H = Q + sum_i lam_i A_i + lam_home A0.

    ``lam`` is ordered (lam_1..lam_m, lam_home), matching constraint_gradients
    rows. No definiteness check happens here.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (q.m + 1,):
        raise DimensionMismatch(f"lambda has shape {lam.shape}, expected ({q.m + 1},)")
    h = q.cost.to_dense()
    for li, a in zip(lam[:-1], q.constraints):
        if li != 0.0:
            h += li * a.to_dense()
    h[q.homog_index, q.homog_index] += lam[-1]
    return ParamSymMatrix.from_dense(h)


def vectorize_params(q: HomQCQP) -> np.ndarray:
    """Full column-major vectorization [vec(Q); vec(A_1); ...; vec(A_m)]."""
    mats = [q.cost.to_dense()] + [a.to_dense() for a in q.constraints]
    return np.concatenate([m.flatten(order="F") for m in mats])


def devectorize_params(nu: np.ndarray, n: int):
    """Inverse of vectorize_params; returns (Q, [A_1..A_m]) as dense arrays."""
    nu = np.asarray(nu, dtype=float)
    if nu.size % (n * n) != 0:
        raise DimensionMismatch(f"length {nu.size} is not a multiple of {n * n}")
    blocks = nu.reshape(-1, n * n)
    mats = [b.reshape((n, n), order="F") for b in blocks]
    return mats[0], mats[1:]
