import numpy as np
import pytest

from certigrad.autotight import FeasibleSampler, find_constraints, tighten_loop
from certigrad.errors import InsufficientSamples
from certigrad.experiments.poly import poly_problem, poly_sampler
from certigrad.linalg import svec
from certigrad.qcqp import build_hom_qcqp
from certigrad.sdp import build_shor_relaxation, solve_sdp

from oracles import svd_rank

NOMINAL = np.array([10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389])


def project_residual(basis_mats, target):
    basis = np.vstack([svec(m) for m in basis_mats])
    v = svec(target)
    coef, *_ = np.linalg.lstsq(basis.T, v, rcond=None)
    return np.linalg.norm(basis.T @ coef - v) / np.linalg.norm(v)


def so3_sampler():
    def draw(rng):
        a = rng.normal(size=(3, 3))
        q_mat, r_mat = np.linalg.qr(a)
        q_mat = q_mat * np.sign(np.diag(r_mat))
        if np.linalg.det(q_mat) < 0:
            q_mat[:, 2] = -q_mat[:, 2]
        w = rng.normal(size=3)
        return np.concatenate([[1.0], q_mat.flatten(order="F"), w])

    return FeasibleSampler(13, draw)


def test_poly_lifting_nullspace(poly_qcqp):
    mats = find_constraints(poly_sampler(), seed=0)
    assert len(mats) == 3
    for a in poly_qcqp.constraints:
        assert project_residual(mats, a.to_dense()) <= 1e-8


def test_returned_constraints_annihilate_holdout():
    mats = find_constraints(poly_sampler(), seed=1)
    rng = np.random.default_rng(99)
    sampler = poly_sampler()
    held = sampler.sample(100, rng)
    for a in mats:
        assert np.linalg.norm(a - a.T) == 0.0
        worst = max(abs(x @ a @ x) for x in held)
        assert worst <= 1e-9 * np.linalg.norm(a) * max(1.0, np.max(held ** 2) * 4)


def test_closure_under_known_constraints(poly_qcqp):
    # with sample_count >= 2 n^2, the known matrices project onto the span
    mats = find_constraints(poly_sampler(), sample_count=2 * 16, seed=2)
    for a in poly_qcqp.constraints:
        assert project_residual(mats, a.to_dense()) <= 1e-8


def test_trivial_one_dimensional_sampler():
    sampler = FeasibleSampler(1, lambda rng: np.array([1.0]))
    assert find_constraints(sampler, sample_count=5, seed=0) == []


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        find_constraints(poly_sampler(), sample_count=5)
    with pytest.raises(ValueError):
        find_constraints(poly_sampler(), tol=-1.0)


def test_so3_lifting_contains_orthogonality_quadratics(stereo_qcqp):
    sampler = so3_sampler()
    mats = find_constraints(sampler, seed=4)
    data_rank = svd_rank(np.vstack(
        [svec(np.outer(x, x)) for x in sampler.sample(3 * 91, np.random.default_rng(5))]))
    # dimension recorded against the sampling-rank oracle
    assert len(mats) == 91 - data_rank
    for a in stereo_qcqp.constraints[:12]:  # row + column orthogonality
        assert project_residual(mats, a.to_dense()) <= 1e-8


def test_monotone_optimal_value(poly_qcqp, nominal_theta):
    values = []
    for m_keep in (2, 3):
        sub = build_hom_qcqp(poly_qcqp.cost, poly_qcqp.constraints[:m_keep], 0)
        sol = solve_sdp(build_shor_relaxation(sub), tol=1e-10)
        values.append(sol.objective)
    # adding constraints can only raise the relaxation value
    assert values[1] >= values[0] - 1e-7 * (1.0 + abs(values[0]))


def test_tighten_already_tight(poly_qcqp):
    out, report = tighten_loop(poly_qcqp, poly_sampler(), seed=0)
    assert report.tight
    assert len(report.rounds) == 1
    assert out.m == poly_qcqp.m


def test_tighten_restores_stripped_instance(poly_qcqp):
    # minimal equivalent stripping: two monomial constraints + homogenizing
    stripped = build_hom_qcqp(poly_qcqp.cost, poly_qcqp.constraints[:2], 0)
    out, report = tighten_loop(stripped, poly_sampler(), seed=0)
    assert report.rounds[0].verdict == "not_tight"
    assert report.tight
    assert report.rounds[-1].ratio > 1e5
    assert out.m > 2
    assert all(out.redundant_flags[2:])


def test_tighten_stereo_row_orthogonality_only():
    # matrix-weighted localization with only row orthogonality: record the
    # outcome of the loop, whether or not extra constraints were needed
    from certigrad.experiments.stereo import (build_localization_qcqp,
                                              make_instance, nominal_camera)
    from certigrad.qcqp import ParamSymMatrix

    rng = np.random.default_rng(21)
    inst = make_instance(nominal_camera(), rng, n_grid=4, weighting="matrix")
    full = build_localization_qcqp(inst, redundant=True)
    # rows 6..11 of the builder are the row-orthonormality quadratics
    row_only = build_hom_qcqp(full.cost, full.constraints[6:12], 0)
    out, report = tighten_loop(row_only, so3_sampler(), max_rounds=30, seed=6)
    assert report.rounds, "loop must record at least the initial round"
    assert report.tight or report.exhausted
    if report.tight:
        assert report.rounds[-1].ratio > 1e5
