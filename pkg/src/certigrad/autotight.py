"""Data-driven discovery of quadratic constraints and relaxation tightening.

Quadratic forms that vanish on the feasible set are exactly the right
nullspace of the data matrix whose rows are scaled half-vectorizations of
x x' over feasible samples x. Discovered forms are appended to a problem
one at a time, most-certain first, until the relaxation solution passes
the rank-1 ratio test; raising the lifting (adding monomials) is out of
scope and left to the caller when the discovered set is exhausted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .certify import NOT_TIGHT, certify
from .errors import InsufficientSamples, SolverFailure
from .linalg import smat, svec
from .qcqp import HomQCQP, ParamSymMatrix, build_hom_qcqp
from .sdp import NUMERICAL_FAILURE, build_shor_relaxation, solve_sdp


@dataclass
class FeasibleSampler:
    """Draws exactly feasible points (homogeneous entry 1) of one problem."""

    dim: int
    draw: Callable[[np.random.Generator], np.ndarray]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return np.vstack([self.draw(rng) for _ in range(count)])


def _data_matrix(samples: np.ndarray) -> np.ndarray:
    rows = np.vstack([svec(np.outer(x, x)) for x in samples])
    # Row normalization conditions the SVD without moving the nullspace.
    norms = np.linalg.norm(rows, axis=1)
    norms[norms == 0] = 1.0
    return rows / norms[:, None]


def find_constraints(sampler: FeasibleSampler, sample_count: int | None = None,
                     tol: float = 1e-8, seed: int = 0,
                     holdout: int = 100) -> list:
    """Orthonormal (Frobenius) basis of quadratics vanishing on the feasible set.

    Returns symmetric matrices ordered by decreasing numerical certainty
    (ascending singular value of the data matrix). Every returned matrix is
    re-checked against held-out samples before being accepted.
    """
    n = sampler.dim
    need = n * (n + 1) // 2
    if sample_count is None:
        sample_count = 3 * need
    if sample_count < need:
        raise InsufficientSamples(
            f"need at least {need} samples for dim {n}, got {sample_count}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    data = _data_matrix(sampler.sample(sample_count, rng))
    _, s, vt = np.linalg.svd(data, full_matrices=True)
    smax = s[0] if s.size else 0.0
    null_idx = [i for i in range(need) if i >= s.size or s[i] <= tol * smax]
    # ascending singular value = descending certainty margin
    null_idx.sort(key=lambda i: s[i] if i < s.size else 0.0)

    held = sampler.sample(holdout, rng)
    out = []
    for i in null_idx:
        a = smat(vt[i], n)
        resid = max(abs(float(x @ a @ x)) for x in held)
        if resid <= 1e-9 * np.linalg.norm(a) * max(1.0, float(np.max(held ** 2)) * n):
            out.append(a)
    return out


@dataclass
class TightenRound:
    round: int
    n_constraints: int
    ratio: float
    verdict: str
    added: bool


@dataclass
class TightenReport:
    rounds: list = field(default_factory=list)
    tight: bool = False
    exhausted: bool = False
    message: str = ""
    discovered_count: int = 0


def _in_span(vec, basis, tol=1e-8):
    if basis.shape[0] == 0:
        return False
    coeff, *_ = np.linalg.lstsq(basis.T, vec, rcond=None)
    return np.linalg.norm(basis.T @ coeff - vec) <= tol * max(np.linalg.norm(vec), 1.0)


def tighten_loop(q: HomQCQP, sampler: FeasibleSampler, max_rounds: int = 25,
                 ratio_threshold: float = 1e5, sdp_tol: float = 1e-10,
                 sample_count: int | None = None, nullspace_tol: float = 1e-8,
                 seed: int = 0):
    """Solve, test tightness, and append discovered constraints until tight.

    Returns (possibly augmented HomQCQP, TightenReport). Constraints already
    in the span of the problem's current ones are skipped. If the discovered
    set runs out before the ratio test passes, the report says so and the
    caller must raise the lifting manually.
    """
    report = TightenReport()

    def attempt(problem, round_idx, added):
        sol = solve_sdp(build_shor_relaxation(problem), tol=sdp_tol)
        if sol.status == NUMERICAL_FAILURE:
            # An under-constrained stripping can make the relaxation
            # unbounded; record the round and keep adding constraints.
            report.rounds.append(TightenRound(round_idx, problem.m, np.nan,
                                              "solver_failure", added))
            report.message = sol.message
            return None
        cert = certify(problem, sol, ratio_threshold=ratio_threshold,
                       require_optimal=False)
        report.rounds.append(TightenRound(round_idx, problem.m,
                                          cert.tightness_ratio, cert.verdict,
                                          added))
        return cert

    cert = attempt(q, 0, added=False)
    if cert is not None and cert.verdict != NOT_TIGHT:
        report.tight = True
        return q, report

    discovered = find_constraints(sampler, sample_count=sample_count,
                                  tol=nullspace_tol, seed=seed)
    report.discovered_count = len(discovered)
    current = q
    span = np.vstack([svec(a.to_dense()) for a in current.constraints]) \
        if current.m else np.zeros((0, q.n * (q.n + 1) // 2))

    round_idx = 1
    for cand in discovered:
        if round_idx > max_rounds:
            break
        v = svec(cand)
        if _in_span(v, span):
            continue
        span = np.vstack([span, v])
        new_constraints = current.constraints + (ParamSymMatrix.from_dense(cand),)
        flags = current.redundant_flags + (True,)
        current = build_hom_qcqp(current.cost, new_constraints,
                                 current.homog_index, flags)
        cert = attempt(current, round_idx, added=True)
        round_idx += 1
        if cert is not None and cert.verdict != NOT_TIGHT:
            report.tight = True
            return current, report

    if report.rounds and report.rounds[-1].verdict == "solver_failure":
        raise SolverFailure(
            f"relaxation still unsolvable after {report.rounds[-1].round} "
            f"rounds: {report.message}")
    report.exhausted = True
    report.message = "discovered constraints exhausted; raise the lifting manually"
    return current, report
