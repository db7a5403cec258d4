"""Bilevel tuning of a sextic polynomial through its certified global minimum.

The inner problem minimizes y(t) = sum_i theta_i t^i over t, lifted to a
homogenized QCQP in the monomial vector x = (1, t, t^2, t^3). The outer
problem moves the coefficients by gradient descent so that the global
minimizer lands on a target point (t_bar, y_bar); gradients flow through
the certified solution, so the outer loop tracks the true global minimum
even when it jumps between basins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autotight import FeasibleSampler
from ..diff import backprop_is, kkt_workspace, solve_certified
from ..errors import TightnessLost
from ..qcqp import HomQCQP, ParamSymMatrix, build_hom_qcqp

# Coefficient layout of the 4x4 cost for y(t) = sum theta_i t^i: entry (i, j)
# contributes to the monomial t^(i+j), so each theta_k is spread uniformly
# over the anti-diagonal i + j = k.
_Q_PATTERN = {
    0: (((0, 0), 1.0),),
    1: (((0, 1), 0.5),),
    2: (((0, 2), 1.0 / 3.0), ((1, 1), 1.0 / 3.0)),
    3: (((0, 3), 0.25), ((1, 2), 0.25)),
    4: (((1, 3), 1.0 / 3.0), ((2, 2), 1.0 / 3.0)),
    5: (((2, 3), 0.5),),
    6: (((3, 3), 1.0),),
}

# Monomial consistency constraints on (1, t, t^2, t^3): t*t = t^2, two
# expressions for t^3, and t*t^3 = (t^2)^2. One is redundant on the variety.
_CONSTRAINT_TRIPLETS = (
    ((0, 2, 0.5), (1, 1, -1.0)),
    ((0, 3, 1.0), (1, 2, -1.0)),
    ((1, 3, 0.5), (2, 2, -1.0)),
)


def poly_problem(theta) -> HomQCQP:
    """Homogenized QCQP whose optimum is the global minimum of the sextic."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (7,):
        raise ValueError(f"expected 7 coefficients, got shape {theta.shape}")
    entries = []
    sens = {}
    for k, pattern in _Q_PATTERN.items():
        sens[k] = tuple((i, j, c) for (i, j), c in pattern)
        for (i, j), c in pattern:
            entries.append((i, j, c * theta[k]))
    cost = ParamSymMatrix(4, tuple(entries), sens)
    constraints = tuple(ParamSymMatrix(4, t) for t in _CONSTRAINT_TRIPLETS)
    return build_hom_qcqp(cost, constraints, homog_index=0)


def poly_value(theta, t: float) -> float:
    return float(np.polyval(np.asarray(theta, dtype=float)[::-1], t))


def poly_derivative(theta, t: float) -> float:
    d = np.polyder(np.asarray(theta, dtype=float)[::-1])
    return float(np.polyval(d, t))


def poly_global_min(theta, lo: float = -8.0, hi: float = 8.0,
                    grid: int = 4001) -> tuple:
    """Global minimizer by dense grid search plus Newton polish.

    Independent of the SDP pipeline; used as the verification oracle.
    """
    theta = np.asarray(theta, dtype=float)
    coeffs = theta[::-1]
    ts = np.linspace(lo, hi, grid)
    vals = np.polyval(coeffs, ts)
    t = float(ts[int(np.argmin(vals))])
    d1 = np.polyder(coeffs)
    d2 = np.polyder(d1)
    for _ in range(60):
        curv = np.polyval(d2, t)
        if curv <= 0:
            break
        step = np.polyval(d1, t) / curv
        t -= step
        if abs(step) < 1e-14:
            break
    return t, float(np.polyval(coeffs, t))


def poly_sampler(scale: float = 2.0) -> FeasibleSampler:
    """Exact feasible points (1, t, t^2, t^3) of the monomial lifting."""

    def draw(rng):
        t = rng.uniform(-scale, scale)
        return np.array([1.0, t, t * t, t ** 3])

    return FeasibleSampler(4, draw)


@dataclass
class BilevelTrace:
    """Per-iteration record of an outer optimization run."""

    losses: list = field(default_factory=list)
    params: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def record(self, loss, params, ratio, grad_norm, **extra):
        self.losses.append(float(loss))
        self.params.append(np.array(params, dtype=float))
        self.ratios.append(float(ratio))
        self.grad_norms.append(float(grad_norm))
        for k, v in extra.items():
            self.extras.setdefault(k, []).append(v)


def poly_bilevel(theta0, target=(1.7, 7.3), lr: float = 2e-3,
                 loss_tol: float = 1e-4, max_outer: int = 10000,
                 sdp_tol: float = 1e-10, ratio_threshold: float = 1.05,
                 step_rule: str = "bb", max_step: float = 2.0) -> BilevelTrace:
    """Tune the coefficients so the global minimum lands on ``target``.

    Gradient descent on (t* - t_bar)^2 + (y(t*) - y_bar)^2, with dt*/dtheta
    obtained by backpropagation through the certified inner solution and the
    explicit dependence of y on theta added directly. Stops when the loss
    drops below ``loss_tol``.

    The loss valley is extremely anisotropic (the two active directions in
    coefficient space are nearly parallel), so a fixed step crawls; the
    default "bb" rule rescales the step from consecutive gradient pairs
    (Barzilai-Borwein, absolute-value variant, clamped to [1e-6, max_step],
    seeded with ``lr``), whose non-monotone excursions work through the
    valley orders of magnitude faster. ``step_rule="fixed"`` gives the plain
    constant-step iteration.

    The per-iteration tightness ratio is recorded as a diagnostic but gated
    only against a permissive threshold: while the outer loop drives the
    global minimum across basins it passes near polynomials with two equal
    minima, where the relaxation solution transiently mixes them. The
    extraction polish still lands on a stationary point there, and one outer
    step later the mixture resolves.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    t_bar, y_bar = float(target[0]), float(target[1])
    trace = BilevelTrace()
    powers = np.arange(7)

    prev_theta = None
    prev_grad = None

    for _ in range(max_outer):
        q = poly_problem(theta)
        try:
            cert, sol = solve_certified(q, tol=sdp_tol, allow_uncertified=True,
                                        ratio_threshold=ratio_threshold)
        except TightnessLost as exc:
            exc.detail = {"trace": trace, **(exc.detail or {})}
            raise
        t_star = float(cert.x[1])
        y_star = poly_value(theta, t_star)
        loss = (t_star - t_bar) ** 2 + (y_star - y_bar) ** 2

        dl_dt = 2.0 * (t_star - t_bar) + 2.0 * (y_star - y_bar) * poly_derivative(theta, t_star)
        incoming = np.array([0.0, dl_dt, 0.0, 0.0])
        ws = kkt_workspace(q, cert.x, cert.lam)
        rep = backprop_is(ws, incoming)
        grad = rep.chain_to_params(q)
        # direct dependence of the loss on theta through y(t*, theta)
        grad += 2.0 * (y_star - y_bar) * t_star ** powers

        trace.record(loss, theta, cert.tightness_ratio, np.linalg.norm(grad),
                     t_star=t_star, y_star=y_star, verdict=cert.verdict)
        if loss < loss_tol:
            trace.converged = True
            break

        if step_rule == "fixed" or prev_theta is None:
            step = lr
        else:
            d_theta = theta - prev_theta
            d_grad = grad - prev_grad
            denom = abs(d_theta @ d_grad)
            step = (d_theta @ d_theta) / denom if denom > 1e-300 else lr
            step = min(max(step, 1e-6), max_step)
        prev_theta = theta.copy()
        prev_grad = grad.copy()
        theta = theta - step * grad
    return trace
