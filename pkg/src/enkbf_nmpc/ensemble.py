"""Ensemble moments.

An ensemble is a plain array of shape ``(..., M, d)``: ``M`` members in
``R^d``, optionally stacked along leading axes (realizations, repetitions).

All covariances are normalized by ``1/M``, not ``1/(M-1)``. This is what
makes the ensemble Kalman-Bucy filter reproduce the Kalman-Bucy moments
exactly, and it differs from ``np.cov``'s default.
"""
from __future__ import annotations

import numpy as np

from .model import InitialLaw


def empirical_mean(ens):
    ens = np.asarray(ens, dtype=float)
    if ens.ndim < 2 or ens.shape[-2] == 0:
        raise ValueError("empirical_mean needs a non-empty ensemble of shape (..., M, d)")
    return ens.mean(axis=-2)


def cross_cov(ens, images):
    """``(1/M) sum_j (x_j - xbar)(g_j - gbar)^T`` over the member axis."""
    ens = np.asarray(ens, dtype=float)
    images = np.asarray(images, dtype=float)
    if ens.shape[:-1] != images.shape[:-1]:
        raise ValueError(f"ensemble {ens.shape} and images {images.shape} have different member counts")
    M = ens.shape[-2]
    dx = ens - ens.mean(axis=-2, keepdims=True)
    dg = images - images.mean(axis=-2, keepdims=True)
    return np.swapaxes(dx, -1, -2) @ dg / M


def covariance(ens):
    C = cross_cov(ens, ens)
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def sqrtm_psd(C):
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh(C)
    return (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(v, -1, -2)


def _inv_sqrtm_pd(S):
    w, v = np.linalg.eigh(S)
    if np.any(w <= 0):
        raise np.linalg.LinAlgError("sample covariance is singular")
    return (v / np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def moment_matched(mean, cov, M: int, rng, size=()):
    """Draw ensembles whose empirical mean and 1/M covariance equal ``mean`` and ``cov``.

    ``mean`` and ``cov`` may carry leading axes which broadcast against ``size``.
    Returns an array of shape ``(*size, M, d)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[-1]
    if M <= d:
        raise ValueError(f"moment matching needs M > d_x (got M={M}, d_x={d})")
    size = (size,) if np.isscalar(size) else tuple(size)
    Z = rng.standard_normal(size + (M, d))
    Z -= Z.mean(axis=-2, keepdims=True)
    S = np.swapaxes(Z, -1, -2) @ Z / M
    W = Z @ _inv_sqrtm_pd(S)
    return mean[..., None, :] + W @ sqrtm_psd(cov)


def moment_matched_initial(law: InitialLaw, M: int, rng, size=()):
    return moment_matched(law.mean, law.cov, M, rng, size)
