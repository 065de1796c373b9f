import numpy as np
import pytest

from enkbf_nmpc.model import InitialLaw, QuadraticCost
from enkbf_nmpc.riccati import LtiSpec, RiccatiBlowUpError, integrate_riccati, kalman_bucy_moments


def scalar_lti(A=0.0, G=1.0, H=1.0, R=1.0):
    return LtiSpec([[A]], [0.0], [[G]], [[H]], [[R]])


def test_zero_cost_gives_zero_schedule():
    lti = LtiSpec([[0.0, 1.0], [0.0, 0.0]], [0.3, 0.0], [[0.0], [1.0]], [[1.0, 0.0]], [[1.0]])
    cost = QuadraticCost(np.zeros((2, 2)), np.array([1.0, -2.0]), np.zeros((2, 2)), np.array([4.0, 0.0]))
    s = integrate_riccati(lti, cost, 1.0, 0.01)
    assert np.all(s.Lambda == 0.0)
    # b acts on lambda only through Lambda, which vanishes
    assert np.all(s.lam == 0.0)


def test_tanh_closed_form():
    cost = QuadraticCost([[1.0]], [0.0], [[0.0]], [0.0])
    s = integrate_riccati(scalar_lti(), cost, 1.0, 1e-4)
    np.testing.assert_allclose(s.Lambda[:, 0, 0], np.tanh(1.0 - s.grid), atol=1e-6)
    assert abs(s.Lambda[0, 0, 0] - 0.76159) < 1e-5


def test_rk4_order():
    cost = QuadraticCost([[1.0]], [0.0], [[0.0]], [0.0])
    errs = [abs(integrate_riccati(scalar_lti(), cost, 1.0, h).Lambda[0, 0, 0] - np.tanh(1.0)) for h in (0.1, 0.05)]
    assert np.log2(errs[0] / errs[1]) >= 3.5


def test_affine_part_against_scalar_closed_form():
    # A=0, G=1, V=1, c=1: lambda = -Lambda at all times (the optimal cost-to-go is 1/2 Lambda (x-1)^2)
    cost = QuadraticCost([[1.0]], [1.0], [[0.0]], [0.0])
    s = integrate_riccati(scalar_lti(), cost, 1.0, 1e-3)
    np.testing.assert_allclose(s.lam[:, 0], -s.Lambda[:, 0, 0], atol=1e-10)


def test_lambda_symmetric_psd():
    lti = LtiSpec([[0.0, 1.0], [2.0, -0.5]], [0.0, 0.0], [[0.0], [1.0]], [[1.0, 0.0]], [[1.0]])
    cost = QuadraticCost(np.diag([3.0, 0.5]), np.zeros(2), np.eye(2), np.zeros(2))
    s = integrate_riccati(lti, cost, 2.0, 1e-3)
    np.testing.assert_array_equal(s.Lambda, np.swapaxes(s.Lambda, -1, -2))
    assert np.linalg.eigvalsh(s.Lambda).min() >= -1e-10


def test_blow_up_is_reported():
    # no control and strongly unstable dynamics with a large terminal weight
    lti = LtiSpec([[50.0]], [0.0], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(RiccatiBlowUpError):
        integrate_riccati(lti, QuadraticCost([[1.0]], [0.0], [[1.0]], [0.0]), 1.0, 1e-3)


def test_kalman_bucy_scalar_closed_form():
    law = InitialLaw([0.0], [[1.0]])
    grid, m, C = kalman_bucy_moments(scalar_lti(), law, 1.0, 1e-4)
    np.testing.assert_allclose(C[:, 0, 0], 1.0 / (1.0 + grid), atol=1e-6)
    np.testing.assert_array_equal(m, 0.0)


def test_kalman_bucy_degenerate_cases():
    law = InitialLaw([1.0, 2.0], np.array([[1.0, 0.2], [0.2, 0.5]]))
    lti = LtiSpec(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros((1, 2)), [[1.0]])
    _, m, C = kalman_bucy_moments(lti, law, 1.0, 0.01)
    np.testing.assert_allclose(C, np.broadcast_to(law.cov, C.shape), atol=1e-15)
    _, _, C0 = kalman_bucy_moments(scalar_lti(), InitialLaw([0.0], [[0.0]]), 1.0, 0.01)
    assert np.all(C0 == 0.0)


def test_kalman_bucy_lyapunov_without_observations():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    lti = LtiSpec(A, np.zeros(2), np.zeros((2, 1)), np.zeros((1, 2)), [[1.0]])
    law = InitialLaw([0.0, 0.0], np.eye(2))
    grid, _, C = kalman_bucy_moments(lti, law, 1.0, 0.01)
    Phi = np.array([[1.0, grid[-1]], [0.0, 1.0]])
    np.testing.assert_allclose(C[-1], Phi @ Phi.T, atol=1e-12)


def test_kalman_bucy_covariance_stays_symmetric():
    lti = LtiSpec([[0.3, 1.0], [-1.0, 0.1]], [0.0, 0.0], [[0.0], [1.0]], [[1.0, 0.4]], [[0.2]])
    _, _, C = kalman_bucy_moments(lti, InitialLaw([0.0, 0.0], np.array([[1.0, 0.3], [0.3, 2.0]])), 2.0, 1e-3)
    assert np.max(np.abs(C - np.swapaxes(C, -1, -2))) <= 1e-12


def test_grid_validation():
    cost = QuadraticCost([[1.0]], [0.0], [[0.0]], [0.0])
    with pytest.raises(ValueError):
        integrate_riccati(scalar_lti(), cost, 1.0, 0.3)
    with pytest.raises(ValueError):
        LtiSpec([[0.0]], [0.0], [[1.0]], [[1.0]], [[-1.0]])
