"""Independent reference computations used to check pipeline outputs.

Everything here is deliberately written without touching the SDP or
backprop code paths: dense factorizations, grid searches, plain descent
and Gauss-Newton, and Monte-Carlo sampling.
"""

import numpy as np


def dense_pinv_solve(a, rhs):
    """Least-squares solution via SVD pseudoinverse."""
    return np.linalg.pinv(a) @ rhs


def svd_rank(a, rtol=1e-8):
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size else 0


def poly_local_min_gd(theta, x0, lr=1e-3, iters=200000, tol=1e-12):
    """Plain gradient descent on the scalar polynomial from a given start."""
    coeffs = np.asarray(theta, dtype=float)[::-1]
    d1 = np.polyder(coeffs)
    x = float(x0)
    for _ in range(iters):
        g = np.polyval(d1, x)
        x_new = x - lr * g
        if abs(x_new - x) < tol:
            break
        x = x_new
    return x, float(np.polyval(coeffs, x))


def _hat(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _expm_so3(w):
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3) + _hat(w)
    k = _hat(w / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * k @ k


def gauss_newton_pose(inst, C0, t0, iters=50):
    """Local pose refinement of sum_k e_k' W_k e_k, axis-angle increments.

    e_k = m~_k - C m_k - C t; the state is perturbed as C <- exp(w^) C.
    Seeded at the ground truth this converges to the nearby local (here
    global) minimum independent of the relaxation machinery.
    """
    C = np.array(C0, dtype=float)
    t = np.array(t0, dtype=float)
    for _ in range(iters):
        rows = []
        errs = []
        for m, y, wmat in zip(inst.landmarks, inst.measurements, inst.weights):
            pred = C @ (m + t)
            e = y - pred
            # pred(w, dt) = exp(w^) C (m + t + dt): d pred = -hat(pred) w + C dt
            # and e = y - pred, so de/d(w, dt) = [hat(pred), -C]
            j_e = np.hstack([_hat(pred), -C])
            lchol = np.linalg.cholesky(wmat + 1e-15 * np.eye(3))
            rows.append(lchol.T @ j_e)
            errs.append(lchol.T @ e)
        jac = np.vstack(rows)
        err = np.concatenate(errs)
        step, *_ = np.linalg.lstsq(jac, -err, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        C = _expm_so3(step[:3]) @ C
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-14:
            break
    return C, t


def monte_carlo_point_covariance(cam, uvd_true, draws, rng):
    """Sampled covariance of the backprojected point under pixel noise."""
    from certigrad.experiments.stereo import backproject

    pts = np.zeros((draws, 3))
    for i in range(draws):
        n_ul = rng.normal(0.0, cam.sigma_u)
        n_ur = rng.normal(0.0, cam.sigma_u)
        n_v = rng.normal(0.0, cam.sigma_v)
        pts[i] = backproject(cam, uvd_true + np.array([n_ul, n_v, n_ul - n_ur]))
    return np.cov(pts.T)


def assemble_dense_n(x, lam_prime, retained, m):
    """Dense KKT-parameter Jacobian via the Kronecker identities.

    Rows: n stationarity rows, one row per retained (non-homogenizing)
    constraint, and a zero row for the homogenizing constraint. Columns:
    the full column-major vectorizations of (Q, A_1..A_m).
    """
    n = x.size
    eye_xt = np.zeros((n, n * n))
    for i in range(n):
        outer = np.zeros((n, n))
        outer[i, :] = x
        eye_xt[i] = outer.flatten(order="F")
    vec_xxt = np.outer(x, x).flatten(order="F")

    blocks = [2.0 * eye_xt]
    blocks += [2.0 * lam_prime[i] * eye_xt for i in range(m)]
    top = np.hstack(blocks)

    mid = np.zeros((len(retained), (m + 1) * n * n))
    for r_idx, ci in enumerate(retained):
        mid[r_idx, (ci + 1) * n * n:(ci + 2) * n * n] = vec_xxt
    bottom = np.zeros((1, (m + 1) * n * n))
    return np.vstack([top, mid, bottom])
