"""Reference solutions for the linear-Gaussian problem.

:func:`integrate_riccati` solves the backward matrix Riccati equation and the
affine offset equation of linear-quadratic control; :func:`kalman_bucy_moments`
integrates the Kalman-Bucy mean and covariance ODEs. Both use classical RK4
so that their discretization error is negligible next to the Euler-based
ensemble methods they check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fbsde import GainSchedule
from .model import InitialLaw, ModelSpec, QuadraticCost, linear_model


class RiccatiBlowUpError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LtiSpec:
    """``dx = (A x + b + G u) dt`` observed through ``dY = H x dt + R^{1/2} dW``."""

    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        G = np.asarray(self.G, dtype=float).reshape(d, -1)
        H = np.asarray(self.H, dtype=float).reshape(-1, d)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if A.shape != (d, d) or b.shape != (d,) or R.shape != (H.shape[0],) * 2:
            raise ValueError("LtiSpec dimensions are inconsistent")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        for name, val in zip("AbGHR", (A, b, G, H, R)):
            object.__setattr__(self, name, val)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    def to_model(self, twin_noise_scale: float = 0.0) -> ModelSpec:
        return linear_model(self.A, self.b, self.G, self.H, self.R, twin_noise_scale)


def _grid(T, dt):
    N = int(round(T / dt))
    if dt <= 0 or N < 1 or not np.isclose(N * dt, T):
        raise ValueError(f"T={T} must be a positive integer multiple of dt={dt}")
    return N, dt * np.arange(N + 1)


def _rk4(rhs, y, t, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_riccati(lti: LtiSpec, cost: QuadraticCost, T: float, dt: float) -> GainSchedule:
    """Backward RK4 for

    ``-dLambda/dt = Lambda A + A^T Lambda - Lambda G G^T Lambda + V``,
    ``-dlambda/dt = A^T lambda - V c + Lambda (b - G G^T lambda)``

    with ``Lambda_T = V_T`` and ``lambda_T = -V_T c_T``.
    """
    N, grid = _grid(T, dt)
    A, b = lti.A, lti.b
    S = lti.G @ lti.G.T
    V, c = cost.V, cost.c
    d = lti.d_x

    def rhs(t, y):
        # time derivative (forward in t) of the packed state
        L, l = y[:d * d].reshape(d, d), y[d * d:]
        dL = -(L @ A + A.T @ L - L @ S @ L + V)
        dl = -(A.T @ l - V @ c + L @ (b - S @ l))
        return np.concatenate([dL.ravel(), dl])

    Lambda = np.empty((N + 1, d, d))
    lam = np.empty((N + 1, d))
    Lambda[N] = cost.V_T
    lam[N] = -cost.V_T @ cost.c_T
    y = np.concatenate([Lambda[N].ravel(), lam[N]])
    for n in range(N, 0, -1):
        y = _rk4(rhs, y, grid[n], -dt)
        if not np.all(np.isfinite(y)) or np.abs(y).max() > 1e12:
            raise RiccatiBlowUpError(f"Riccati solution escapes at t={grid[n - 1]:g}")
        L = y[:d * d].reshape(d, d)
        L = 0.5 * (L + L.T)
        y[:d * d] = L.ravel()
        Lambda[n - 1] = L
        lam[n - 1] = y[d * d:]
    return GainSchedule(grid, Lambda, lam)


def kalman_bucy_moments(lti: LtiSpec, law: InitialLaw, T: float, dt: float, control=None, obs_rate=None):
    """RK4 integration of the Kalman-Bucy moment ODEs.

    ``dm/dt = A m + b + G u(t) + C H^T R^{-1} (y'(t) - H m)`` and
    ``dC/dt = A C + C A^T - C H^T R^{-1} H C``.

    ``control(t)`` and ``obs_rate(t)`` (the observation derivative, for a
    smooth data path) are optional; without ``obs_rate`` the innovation term
    is dropped, which is the noise-free mean equation. Returns
    ``(grid, means, covs)``.
    """
    N, grid = _grid(T, dt)
    A, b, G, H = lti.A, lti.b, lti.G, lti.H
    HtRinv = H.T @ np.linalg.inv(lti.R)
    d = lti.d_x

    def rhs(t, y):
        m, C = y[:d], y[d:].reshape(d, d)
        dm = A @ m + b
        if control is not None:
            dm = dm + G @ np.atleast_1d(control(t))
        if obs_rate is not None:
            dm = dm + C @ HtRinv @ (np.atleast_1d(obs_rate(t)) - H @ m)
        dC = A @ C + C @ A.T - C @ HtRinv @ H @ C
        return np.concatenate([dm, dC.ravel()])

    means = np.empty((N + 1, d))
    covs = np.empty((N + 1, d, d))
    means[0], covs[0] = law.mean, law.cov
    y = np.concatenate([law.mean, law.cov.ravel()])
    for n in range(N):
        y = _rk4(rhs, y, grid[n], dt)
        C = y[d:].reshape(d, d)
        C = 0.5 * (C + C.T)
        y[d:] = C.ravel()
        means[n + 1], covs[n + 1] = y[:d], C
    return grid, means, covs
