import numpy as np
import pytest

from certigrad.diff import (GradientReport, apply_n_adjoint, backprop_cift,
                            backprop_is, fd_jacobian_oracle, kkt_workspace,
                            solve_certified, TightnessLostUnderPerturbation)
from certigrad.errors import (LSQRDiverged, MultiplierResidualTooLarge,
                              NotStationary)
from certigrad.experiments.poly import poly_problem
from certigrad.qcqp import ParamSymMatrix, build_hom_qcqp

from oracles import assemble_dense_n


@pytest.fixture(scope="module")
def poly_ws(poly_qcqp, poly_solution):
    cert, _ = poly_solution
    return kkt_workspace(poly_qcqp, cert.x, cert.lam)


def test_workspace_contents(poly_ws):
    assert poly_ws.independent_rows.tolist()[-1] == 3  # homogenizing row kept
    assert len(poly_ws.independent_rows) == 3
    assert np.linalg.norm(poly_ws.hbar @ poly_ws.x) <= 1e-10
    assert poly_ws.lam_prime.shape == (3,)


def test_workspace_rejects_nonstationary(poly_qcqp):
    with pytest.raises(NotStationary):
        kkt_workspace(poly_qcqp, np.array([1.0, 0.3, 0.09, 0.027]),
                      np.zeros(4))


def test_zero_incoming_gives_zero_gradients(poly_qcqp, poly_ws, poly_solution):
    cert, _ = poly_solution
    for rep in (backprop_is(poly_ws, np.zeros(4)),
                backprop_cift(poly_qcqp, cert.x, np.zeros(4))):
        assert np.all(rep.grad_Q == 0.0)
        assert all(np.all(g == 0.0) for g in rep.grad_A)


def test_report_shapes_and_symmetry(poly_qcqp, poly_ws):
    rep = backprop_is(poly_ws, np.array([0.0, 1.0, 0.0, 0.0]))
    assert rep.method == "is"
    assert rep.as_vector().shape == (4 * 16,)
    assert np.array_equal(rep.grad_Q, rep.grad_Q.T)
    for g in rep.grad_A:
        assert np.array_equal(g, g.T)


def test_n_adjoint_trivial_cases():
    x = np.array([1.0, 0.0, 0.0])
    grad_q, grad_a = apply_n_adjoint(x, np.zeros(2), np.zeros(3),
                                     np.zeros(1), np.array([0]))
    assert np.all(grad_q == 0.0) and all(np.all(g == 0.0) for g in grad_a)

    # single outer product: x = e_h, y_x = e_j
    y_x = np.array([0.0, 1.0, 0.0])
    grad_q, grad_a = apply_n_adjoint(x, np.zeros(2), y_x, np.zeros(0),
                                     np.array([], dtype=int))
    expected = np.outer(y_x, x)
    expected = expected + expected.T
    assert np.array_equal(grad_q, expected)


def test_n_adjoint_matches_dense_assembly():
    rng = np.random.default_rng(5)
    n, m = 5, 4
    retained = np.array([0, 2])
    for _ in range(10):
        x = rng.normal(size=n)
        lam_prime = rng.normal(size=m)
        y_x = rng.normal(size=n)
        y_g = rng.normal(size=retained.size)
        y = np.concatenate([y_x, y_g, [rng.normal()]])
        n_dense = assemble_dense_n(x, lam_prime, retained, m)
        grad_q, grad_a = apply_n_adjoint(x, lam_prime, y_x, y_g, retained,
                                         y_h=y[-1])
        got = np.concatenate([grad_q.flatten(order="F")]
                             + [g.flatten(order="F") for g in grad_a])
        expected = n_dense.T @ y
        # adjoint identity <N'y, dnu> = <y, N dnu>; dense N is unsymmetrized,
        # so compare after symmetrizing its blocks the same way
        dnu = rng.normal(size=expected.size)
        mats = dnu.reshape(m + 1, n, n)
        sym_dnu = np.stack([0.5 * (a + a.T) for a in mats]).reshape(-1)
        assert abs(got @ sym_dnu - expected @ sym_dnu) <= 1e-10 * (
            1.0 + abs(expected @ sym_dnu))


def test_mr_full_row_rank_and_pinv(poly_ws, stereo_qcqp, stereo_solution):
    m_r = poly_ws.m_r_dense()
    pinv = np.linalg.pinv(m_r)
    assert np.linalg.norm(m_r @ pinv - np.eye(m_r.shape[0])) <= 1e-8

    cert, _ = stereo_solution
    ws = kkt_workspace(stereo_qcqp, cert.x, cert.lam)
    m_r2 = ws.m_r_dense()
    pinv2 = np.linalg.pinv(m_r2)
    assert np.linalg.norm(m_r2 @ pinv2 - np.eye(m_r2.shape[0])) <= 1e-8


def test_backprop_matches_dense_pseudoinverse(poly_qcqp, poly_ws):
    # adjoint route against the explicit J = -P Mr^+ N formula
    n = poly_ws.n
    incoming = np.array([0.0, 1.0, 0.0, 0.0])
    rep = backprop_is(poly_ws, incoming)
    m_r = poly_ws.m_r_dense()
    n_dense = assemble_dense_n(poly_ws.x, poly_ws.lam_prime,
                               poly_ws.independent_rows[:-1], poly_qcqp.m)
    p_sel = np.zeros((n, m_r.shape[1]))
    p_sel[:, :n] = np.eye(n)
    j = -p_sel @ np.linalg.pinv(m_r) @ n_dense
    grad_nu = j.T @ incoming
    expected = []
    for k in range(poly_qcqp.m + 1):
        blk = grad_nu[k * n * n:(k + 1) * n * n].reshape(n, n, order="F")
        expected.append((0.5 * (blk + blk.T)).flatten(order="F"))
    expected = np.concatenate(expected)
    got = rep.as_vector()
    assert np.linalg.norm(got - expected) <= 1e-8 * (1.0 + np.linalg.norm(expected))


def test_is_cift_fd_agreement_poly(poly_qcqp, poly_solution, nominal_theta):
    cert, _ = poly_solution
    ws = kkt_workspace(poly_qcqp, cert.x, cert.lam)
    incoming = np.array([0.0, 1.0, 0.0, 0.0])
    g_is = backprop_is(ws, incoming).chain_to_params(poly_qcqp)
    g_cift = backprop_cift(poly_qcqp, cert.x, incoming).chain_to_params(poly_qcqp)
    g_red = backprop_is(ws, incoming,
                        fully_reduced_kkt=True).chain_to_params(poly_qcqp)

    j_fd = fd_jacobian_oracle(poly_problem, nominal_theta, h=1e-5)
    g_fd = j_fd[1]
    scale = np.max(np.abs(g_fd))
    assert np.max(np.abs(g_is - g_fd)) <= 1e-4 * scale
    assert np.max(np.abs(g_cift - g_fd)) <= 1e-4 * scale
    assert np.max(np.abs(g_is - g_cift)) <= 1e-5 * max(np.max(np.abs(g_cift)), 1e-300)
    assert np.max(np.abs(g_red - g_is)) <= 1e-6 * scale


def test_grad_q_agreement_between_methods(poly_qcqp, poly_solution):
    # gradients w.r.t. the cost matrix are unique across engines
    cert, _ = poly_solution
    ws = kkt_workspace(poly_qcqp, cert.x, cert.lam)
    rng = np.random.default_rng(11)
    for _ in range(5):
        incoming = rng.normal(size=4)
        g1 = backprop_is(ws, incoming).grad_Q
        g2 = backprop_cift(poly_qcqp, cert.x, incoming).grad_Q
        assert np.max(np.abs(g1 - g2)) <= 1e-7 * (1.0 + np.max(np.abs(g2)))


def test_cift_multiplier_residual_guard(poly_qcqp):
    x_bad = np.array([1.0, 0.5, 0.25, 0.125])  # not a stationary point
    with pytest.raises(MultiplierResidualTooLarge):
        backprop_cift(poly_qcqp, x_bad, np.zeros(4))


def test_fd_oracle_constant_map(poly_qcqp):
    j = fd_jacobian_oracle(lambda theta: poly_qcqp, np.array([0.5, -0.2]),
                           h=1e-5)
    assert j.shape == (4, 2)
    assert np.max(np.abs(j)) <= 1e-9


def test_fd_oracle_reports_broken_perturbation(nominal_theta):
    def fragile(theta):
        if abs(theta[0] - nominal_theta[0]) > 1e-7:
            # two symmetric global minimizers: relaxation cannot be rank one
            q = poly_problem(np.array([0.0, 0.0, -1.0, 0.0, 0.1, 0.0, 0.0]))
        else:
            q = poly_problem(nominal_theta)
        return q

    with pytest.raises(TightnessLostUnderPerturbation) as err:
        fd_jacobian_oracle(fragile, nominal_theta.copy(), h=1e-5)
    assert err.value.detail["index"] == 0
