import numpy as np
import pytest

from certigrad.certify import (NOT_TIGHT, TIGHT_CERTIFIED, certificate_check,
                               certify, extract_rank1, polish_solution,
                               suboptimality_gap, tightness_ratio)
from certigrad.errors import (DegenerateObjective, DimensionMismatch,
                              HomogeneousEntryZero)
from certigrad.experiments.poly import poly_problem, poly_value

from oracles import gauss_newton_pose, poly_local_min_gd


def test_tightness_ratio_basics():
    assert tightness_ratio(np.diag([1.0, 1e-6, 0.0, 0.0])) == pytest.approx(1e6)
    assert tightness_ratio(np.eye(4)) == pytest.approx(1.0)
    assert tightness_ratio(np.diag([1.0, 0.0])) == np.inf
    with pytest.raises(DimensionMismatch):
        tightness_ratio(np.array([[1.0]]))


def test_tightness_ratio_scale_invariance():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 2))
    x_mat = v @ v.T
    r = tightness_ratio(x_mat)
    for alpha in (0.25, 2.0, 1024.0):  # exact float scalings
        assert tightness_ratio(alpha * x_mat) == r
    for alpha in (1e-7, 3.0, 1e9):  # general positive scalings, ulp-level
        assert tightness_ratio(alpha * x_mat) == pytest.approx(r, rel=1e-13)


def test_poly_solution_ratio_above_empirical_bar(poly_solution):
    cert, _ = poly_solution
    assert cert.tightness_ratio > 1e5


def test_extract_rank1_roundtrip_and_sign():
    x_bar = np.array([1.0, 2.0, 4.0, 8.0])
    cert = extract_rank1(np.outer(x_bar, x_bar), 0, ratio_threshold=1e5)
    assert np.allclose(cert.x, x_bar, atol=1e-10)
    cert_flipped = extract_rank1(np.outer(-x_bar, -x_bar), 0)
    assert np.allclose(cert_flipped.x, x_bar, atol=1e-10)
    assert cert.x[0] == 1.0


def test_extract_rank1_roundtrip_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=6)
        x /= x[2]
        cert = extract_rank1(np.outer(x, x), 2)
        assert cert.x[2] == 1.0
        assert np.linalg.norm(cert.x - x) <= 1e-10 * np.linalg.norm(x)


def test_extract_rank1_not_tight_carries_matrix():
    x_mat = np.diag([1.0, 0.5, 0.0])
    cert = extract_rank1(x_mat, 0, ratio_threshold=1e5)
    assert cert.verdict == NOT_TIGHT
    assert cert.x is None
    assert np.array_equal(cert.X, x_mat)


def test_extract_rank1_zero_homogeneous_entry():
    v = np.array([0.0, 1.0, 0.0])
    with pytest.raises(HomogeneousEntryZero):
        extract_rank1(np.outer(v, v), 0)


def test_extract_stereo_matches_local_refinement(stereo_instance, stereo_qcqp,
                                                 stereo_solution):
    from certigrad.experiments.stereo import pose_from_solution, pose_errors

    cert, _ = stereo_solution
    c_est, t_est = pose_from_solution(cert.x)
    c_ref, t_ref = gauss_newton_pose(stereo_instance, *stereo_instance.ground_truth)
    dt, drot = pose_errors(c_est, t_est, c_ref, t_ref)
    assert dt <= 1e-5
    assert drot <= 1e-5


def test_certificate_check_flags():
    flags = certificate_check(np.diag([0.0, 1.0, 2.0]), np.array([1.0, 0, 0]))
    assert flags.psd_ok and flags.stationarity_ok and flags.corank1_ok
    flags2 = certificate_check(np.diag([0.0, 0.0, 1.0]), np.array([1.0, 0, 0]))
    assert not flags2.corank1_ok
    with pytest.raises(DimensionMismatch):
        certificate_check(np.eye(3), np.ones(4))


def test_certificate_check_poly_optimum(poly_solution):
    cert, _ = poly_solution
    assert cert.verdict == TIGHT_CERTIFIED
    assert cert.certificate_min_eig >= -1e-7
    assert cert.stationarity_residual <= 1e-6
    assert cert.certificate_second_eig >= 1e-6


def test_suboptimality_gap_cases(poly_qcqp, poly_solution, nominal_theta):
    cert, sol = poly_solution
    q_mat = poly_qcqp.cost.to_dense()
    # exact extracted factor: essentially zero gap
    mu = suboptimality_gap(q_mat, cert.x, sol.X)
    assert abs(mu) <= 1e-9

    # inflate the slack directions and cross-check against direct evaluation
    rng = np.random.default_rng(3)
    v = rng.normal(size=4)
    v -= v @ cert.x * cert.x / (cert.x @ cert.x)
    x_infl = np.outer(cert.x, cert.x) + 2.0 * np.outer(v, v)
    mu2 = suboptimality_gap(q_mat, cert.x, x_infl)
    direct = (cert.x @ q_mat @ cert.x - np.tensordot(q_mat, x_infl)) \
        / np.tensordot(q_mat, x_infl)
    assert mu2 == pytest.approx(direct, rel=1e-12)

    # local (non-global) minimum of the sextic has positive relative gap
    t_local, _ = poly_local_min_gd(nominal_theta, x0=2.0)
    x_local = np.array([1.0, t_local, t_local ** 2, t_local ** 3])
    assert poly_value(nominal_theta, t_local) > sol.objective + 1.0
    assert suboptimality_gap(q_mat, x_local, sol.X) > 0.0

    with pytest.raises(DegenerateObjective):
        suboptimality_gap(np.zeros((4, 4)), cert.x, sol.X)


def test_rank1_objective_consistency(poly_qcqp, poly_solution, stereo_qcqp,
                                     stereo_solution):
    for q, (cert, sol) in ((poly_qcqp, poly_solution),
                           (stereo_qcqp, stereo_solution)):
        obj_x = cert.x @ q.cost.to_dense() @ cert.x
        assert abs(obj_x - sol.objective) <= 1e-6 * (1.0 + abs(sol.objective))


def test_polish_improves_stationarity(poly_qcqp, poly_solution):
    _, sol = poly_solution
    raw = extract_rank1(sol.X, 0)
    x_pol, lam_pol = polish_solution(poly_qcqp, raw.x, sol.lam)
    from certigrad.qcqp import certificate_matrix, eval_objective_and_residuals
    h = certificate_matrix(poly_qcqp, lam_pol).to_dense()
    assert np.linalg.norm(h @ x_pol) <= 1e-10
    _, res = eval_objective_and_residuals(poly_qcqp, x_pol)
    assert np.max(np.abs(res)) <= 1e-12


def test_certify_requires_optimal_status(poly_qcqp, poly_solution):
    _, sol = poly_solution
    import dataclasses
    bad = dataclasses.replace(sol, status="numerical_failure")
    cert = certify(poly_qcqp, bad)
    assert cert.verdict == NOT_TIGHT
    cert2 = certify(poly_qcqp, bad, require_optimal=False)
    assert cert2.verdict == TIGHT_CERTIFIED
