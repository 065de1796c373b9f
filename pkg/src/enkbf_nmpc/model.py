"""Control-affine models, observation operators and quadratic costs.

All maps act on the trailing axis, so a state array of shape ``(..., d_x)``
(a single state, an ensemble, or a batch of ensembles) is evaluated in one
call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import guvectorize

Array = np.ndarray


def _sym_power(mat: Array, power: float) -> Array:
    w, v = np.linalg.eigh(mat)
    return (v * w**power) @ v.T


@dataclass(frozen=True)
class ModelSpec:
    """Controlled ODE ``dx = (f(x) + G u) dt`` observed through ``dY = h(x) dt + R^{1/2} dW``.

    ``twin_noise_scale`` is the diffusion coefficient of the physical twin
    only; the digital twin model is deterministic.
    """

    drift: Callable[[Array], Array]
    control_matrix: Array
    obs_map: Callable[[Array], Array]
    obs_cov: Array
    twin_noise_scale: float = 0.0
    name: str = "model"

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.control_matrix, dtype=float))
        R = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        if R.shape[0] != R.shape[1]:
            raise ValueError(f"obs_cov must be square, got {R.shape}")
        if not np.allclose(R, R.T):
            raise ValueError("obs_cov must be symmetric")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("obs_cov must be positive definite")
        if self.twin_noise_scale < 0:
            raise ValueError("twin_noise_scale must be non-negative")
        object.__setattr__(self, "control_matrix", G)
        object.__setattr__(self, "obs_cov", R)
        object.__setattr__(self, "_R_inv", np.linalg.inv(R))
        object.__setattr__(self, "_R_sqrt", _sym_power(R, 0.5))
        object.__setattr__(self, "_R_inv_sqrt", _sym_power(R, -0.5))
        # probe the maps once so dimension errors surface at construction
        x0 = np.zeros(self.d_x)
        if np.shape(self.drift(x0)) != (self.d_x,):
            raise ValueError("drift must map R^d_x to R^d_x")
        if np.shape(self.obs_map(x0)) != (self.d_y,):
            raise ValueError(f"obs_map must map R^{self.d_x} to R^{self.d_y}")

    @property
    def d_x(self) -> int:
        return self.control_matrix.shape[0]

    @property
    def d_u(self) -> int:
        return self.control_matrix.shape[1]

    @property
    def d_y(self) -> int:
        return self.obs_cov.shape[0]

    @property
    def obs_cov_inv(self) -> Array:
        return self._R_inv

    @property
    def obs_cov_sqrt(self) -> Array:
        return self._R_sqrt

    @property
    def obs_cov_inv_sqrt(self) -> Array:
        return self._R_inv_sqrt


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost ``0.5 (x-c)^T V (x-c)`` and terminal cost ``0.5 (x-c_T)^T V_T (x-c_T)``."""

    V: Array
    c: Array
    V_T: Array
    c_T: Array

    def __post_init__(self):
        for name in ("V", "V_T"):
            mat = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(mat).min() < -1e-12 * max(1.0, np.abs(mat).max()):
                raise ValueError(f"{name} must be positive semi-definite")
            object.__setattr__(self, name, mat)
        for name in ("c", "c_T"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        d = self.V.shape[0]
        if self.V_T.shape != (d, d) or self.c.shape != (d,) or self.c_T.shape != (d,):
            raise ValueError("cost dimensions are inconsistent")

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @classmethod
    def isotropic(cls, d: int, weight: float, terminal_weight: float,
                  target=None, terminal_target=None) -> "QuadraticCost":
        target = np.zeros(d) if target is None else target
        terminal_target = np.zeros(d) if terminal_target is None else terminal_target
        return cls(weight * np.eye(d), target, terminal_weight * np.eye(d), terminal_target)

    def value(self, x: Array) -> Array:
        return _quad(self.V, self.c, x)

    def terminal_value(self, x: Array) -> Array:
        return _quad(self.V_T, self.c_T, x)

    def grad(self, x: Array) -> Array:
        return running_cost_grad(self, x)

    def terminal_grad(self, x: Array) -> Array:
        return terminal_cost_grad(self, x)


def _quad(V, c, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != V.shape[0]:
        raise ValueError(f"state dimension {x.shape[-1]} does not match cost dimension {V.shape[0]}")
    e = x - c
    return 0.5 * np.einsum("...i,ij,...j->...", e, V, e)


def _affine_grad(V, c, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != V.shape[0]:
        raise ValueError(f"state dimension {x.shape[-1]} does not match cost dimension {V.shape[0]}")
    return (x - c) @ V.T


def running_cost_grad(cost: QuadraticCost, x: Array) -> Array:
    """Gradient ``V (x - c)`` of the running cost, broadcast over leading axes."""
    return _affine_grad(cost.V, cost.c, x)


def terminal_cost_grad(cost: QuadraticCost, x: Array) -> Array:
    """Gradient ``V_T (x - c_T)`` of the terminal cost."""
    return _affine_grad(cost.V_T, cost.c_T, x)


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian initial law with mean ``mean`` and covariance ``cov``."""

    mean: Array
    cov: Array

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        C = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if C.shape != (m.size, m.size):
            raise ValueError(f"cov shape {C.shape} does not match mean of size {m.size}")
        if not np.allclose(C, C.T):
            raise ValueError("cov must be symmetric")
        if np.linalg.eigvalsh(C).min() < -1e-12 * max(1.0, np.abs(C).max()):
            raise ValueError("cov must be positive semi-definite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", C)

    @property
    def dim(self) -> int:
        return self.mean.size


def control_law(Lambda: Array, lam: Array, xbar: Array, G: Array) -> Array:
    """Affine feedback ``u = -G^T (Lambda xbar + lam)``.

    Every argument may carry matching leading batch axes.
    """
    Lambda = np.asarray(Lambda, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if Lambda.shape[-1] != xbar.shape[-1] or Lambda.shape[-2] != G.shape[0]:
        raise ValueError("control_law: inconsistent dimensions")
    y = np.einsum("...ij,...j->...i", Lambda, xbar) + lam
    return -(y @ G)


@guvectorize(["void(float64[:], float64, float64[:])"], "(n),()->(n)", cache=True)
def _pendulum_drift(x, gamma, out):
    out[0] = x[1]
    out[1] = math.sin(x[0]) - gamma * x[1]


def pendulum_model(gamma: float = 5.0, obs_cov: float = 1.0, twin_noise_scale: float = 0.0) -> ModelSpec:
    """Damped pendulum ``phi'' = sin(phi) - gamma phi' + u`` with the angle observed.

    ``phi = 0`` is the upright (unstable) equilibrium, ``phi = pi`` the hanging one.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")

    def drift(x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 2:
            raise ValueError(f"pendulum state must have 2 components, got shape {x.shape}")
        # empty_like keeps the memory layout of x (ensembles are often member-last views)
        return _pendulum_drift(x, gamma, np.empty_like(x))

    def obs_map(x):
        return np.asarray(x, dtype=float)[..., :1]

    return ModelSpec(drift, np.array([[0.0], [1.0]]), obs_map, np.array([[obs_cov]]),
                     twin_noise_scale, name="pendulum")


def linear_model(A, b, G, H, R, twin_noise_scale: float = 0.0) -> ModelSpec:
    """``f(x) = A x + b`` observed through ``h(x) = H x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))

    def drift(x):
        return np.asarray(x, dtype=float) @ A.T + b

    def obs_map(x):
        return np.asarray(x, dtype=float) @ H.T

    return ModelSpec(drift, G, obs_map, np.atleast_2d(R), twin_noise_scale, name="linear")
