import numpy as np
import pytest

from certigrad.diff import solve_certified
from certigrad.experiments.poly import poly_problem
from certigrad.experiments.stereo import (build_localization_qcqp,
                                          make_instance, nominal_camera)

NOMINAL_THETA = np.array([10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389])


@pytest.fixture(scope="session")
def nominal_theta():
    return NOMINAL_THETA.copy()


@pytest.fixture(scope="session")
def poly_qcqp():
    return poly_problem(NOMINAL_THETA)


@pytest.fixture(scope="session")
def poly_solution(poly_qcqp):
    """(CertifiedSolution, SDPPrimalDual) of the nominal polynomial problem."""
    return solve_certified(poly_qcqp, tol=1e-10)


@pytest.fixture(scope="session")
def stereo_instance():
    rng = np.random.default_rng(42)
    return make_instance(nominal_camera(), rng, n_grid=8, weighting="matrix")


@pytest.fixture(scope="session")
def stereo_qcqp(stereo_instance):
    return build_localization_qcqp(stereo_instance, redundant=True,
                                   landmark_sensitivity=True)


@pytest.fixture(scope="session")
def stereo_solution(stereo_qcqp):
    return solve_certified(stereo_qcqp, tol=1e-10)
