"""Euler steps of the deterministic-transport ensemble Kalman-Bucy filter.

Two forms share the same deviation dynamics:

* :func:`assimilate_step` consumes an actual observation increment (the
  digital twin),
* :func:`simulated_step` replaces the innovation by a Brownian increment
  (prediction of future observations inside the FBSDE solver).

Ensembles have shape ``(..., M, d_x)``; controls ``(..., d_u)`` and
increments ``(..., d_y)`` share the leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import covariance, cross_cov, empirical_mean
from .model import ModelSpec


class FilterDivergenceError(FloatingPointError):
    """An ensemble member became non-finite."""


@dataclass
class FilterState:
    ensemble: np.ndarray
    t: float = 0.0

    @property
    def mean(self):
        return empirical_mean(self.ensemble)

    @property
    def cov(self):
        return covariance(self.ensemble)


def _gain_terms(X, model: ModelSpec, u):
    hX = model.obs_map(X)
    hbar = hX.mean(axis=-2, keepdims=True)
    gain = cross_cov(X, hX) @ model.obs_cov_inv          # C^{xh} R^{-1}
    forcing = model.drift(X) + (np.asarray(u, dtype=float) @ model.control_matrix.T)[..., None, :]
    return hX, hbar, gain, forcing


def _checked(X_new, t=None):
    if not np.all(np.isfinite(X_new)):
        where = "" if t is None else f" at t={t:g}"
        raise FilterDivergenceError(f"non-finite ensemble member{where}")
    return X_new


def assimilate_step(X, model: ModelSpec, u, dY_obs, dt: float, t=None):
    """One step of ``dX = (f + Gu - 1/2 C^{xh} R^{-1} (h(X) + hbar)) dt + C^{xh} R^{-1} dY``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = np.asarray(X, dtype=float)
    hX, hbar, gain, forcing = _gain_terms(X, model, u)
    innov = -0.5 * (hX + hbar) @ np.swapaxes(gain, -1, -2)
    shift = np.einsum("...ij,...j->...i", gain, np.asarray(dY_obs, dtype=float))
    return _checked(X + dt * (forcing + innov) + shift[..., None, :], t)


def simulated_step(X, model: ModelSpec, u, dW, dt: float, t=None):
    """One step of ``dX = (f + Gu - 1/2 C^{xh} R^{-1} (h(X) - hbar)) dt + C^{xh} R^{-1/2} dW``.

    The noise term is common to all members of an ensemble, so it moves
    only the mean.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = np.asarray(X, dtype=float)
    hX, hbar, gain, forcing = _gain_terms(X, model, u)
    innov = -0.5 * (hX - hbar) @ np.swapaxes(gain, -1, -2)
    noise_gain = gain @ model.obs_cov_sqrt               # C^{xh} R^{-1} R^{1/2}
    shift = np.einsum("...ij,...j->...i", noise_gain, np.asarray(dW, dtype=float))
    return _checked(X + dt * (forcing + innov) + shift[..., None, :], t)
