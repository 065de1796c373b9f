"""Ensemble solver for the filter-driven forward-backward SDE.

The forward equation is the simulated-innovation EnKBF, run for ``K``
independent noise realizations of ``M`` members each. The backward
equation for the realization-mean costate is approximated by an affine
regression on the realization means, which yields a time-varying linear
feedback law ``u = -G^T (Lambda_t xbar + lambda_t)``.

Array layout: ensembles ``(..., K, M, d)``, realization means
``(..., K, d)``; the optional leading axes batch independent problems
(e.g. repetitions of a receding-horizon run).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import cross_cov, moment_matched
from ._kernels import backward_sweep_kernel, moments_and_step
from .filter import FilterDivergenceError
from .model import InitialLaw, ModelSpec, QuadraticCost, control_law
from .rng import as_streams

RIDGE_REL = 1e-8
_TINY = np.finfo(float).tiny
# smallest admissible eigenvalue ratio of a regression matrix
_COND_FLOOR = 1e-14


class SingularRegressionError(np.linalg.LinAlgError):
    pass


class PicardDivergenceError(FloatingPointError):
    pass


@dataclass
class GainSchedule:
    """Feedback gains ``(Lambda_n, lambda_n)`` on a time grid.

    ``Lambda`` has shape ``(..., N+1, d, d)`` and ``lam`` ``(..., N+1, d)``.
    """

    grid: np.ndarray
    Lambda: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 1 or self.grid.size == 0:
            raise ValueError("gain schedule needs a non-empty 1-D grid")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("gain schedule grid must be strictly increasing")
        if self.Lambda.shape[-3] != self.grid.size or self.lam.shape[-2] != self.grid.size:
            raise ValueError("gain count does not match grid length")

    @classmethod
    def zeros(cls, grid, d: int, batch=()) -> "GainSchedule":
        grid = np.asarray(grid, dtype=float)
        batch = tuple(batch)
        return cls(grid, np.zeros(batch + (grid.size, d, d)), np.zeros(batch + (grid.size, d)))

    @property
    def dim(self) -> int:
        return self.Lambda.shape[-1]

    def node(self, n: int):
        return self.Lambda[..., n, :, :], self.lam[..., n, :]

    def interpolate(self, t: float):
        """Entrywise linear interpolation, clamped to the end nodes outside the grid."""
        grid = self.grid
        if t <= grid[0]:
            return self.node(0)
        if t >= grid[-1]:
            return self.node(grid.size - 1)
        i = int(np.searchsorted(grid, t, side="right")) - 1
        if t == grid[i]:
            return self.node(i)
        w = (t - grid[i]) / (grid[i + 1] - grid[i])
        L0, l0 = self.node(i)
        L1, l1 = self.node(i + 1)
        return (1 - w) * L0 + w * L1, (1 - w) * l0 + w * l1

    def shifted(self, steps: int) -> "GainSchedule":
        """Same grid, gains advanced by ``steps`` nodes; the uncovered tail is zero."""
        Lambda = np.zeros_like(self.Lambda)
        lam = np.zeros_like(self.lam)
        n = self.grid.size - steps
        if n > 0:
            Lambda[..., :n, :, :] = self.Lambda[..., steps:, :, :]
            lam[..., :n, :] = self.lam[..., steps:, :]
        return GainSchedule(self.grid.copy(), Lambda, lam)

    def feedback_gain(self, G) -> np.ndarray:
        """``G^T Lambda_t`` at every node, shape ``(..., N+1, d_u, d)``."""
        return np.einsum("ij,...nik->...njk", np.atleast_2d(G), self.Lambda)

    def to_csv(self, path) -> None:
        if self.Lambda.ndim != 3:
            raise ValueError("only unbatched schedules can be written to CSV")
        d = self.dim
        header = ["t"] + [f"Lambda_{i}_{j}" for i in range(d) for j in range(d)] + [f"lambda_{i}" for i in range(d)]
        rows = np.column_stack([self.grid, self.Lambda.reshape(self.grid.size, d * d), self.lam])
        write_csv(path, header, rows)

    @classmethod
    def from_csv(cls, path) -> "GainSchedule":
        header, rows = read_csv(path)
        d = sum(1 for h in header if h.startswith("lambda_"))
        n = rows.shape[0]
        return cls(rows[:, 0], rows[:, 1:1 + d * d].reshape(n, d, d), rows[:, 1 + d * d:1 + d * d + d])


def write_csv(path, header, rows) -> None:
    """CSV with a header line; floats in shortest round-trip form."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.asarray(rows, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = np.array([[float(v) for v in row] for row in r], dtype=float)
    return header, rows.reshape(-1, len(header))


@dataclass
class RealizationBundle:
    """Forward-sweep record for ``K`` realizations on a shared grid.

    Node-indexed arrays: ``means (..., N+1, K, d)``, ``cov`` and ``cxf``
    ``(..., N+1, K, d, d)``, ``cxh (..., N+1, K, d, d_y)``, ``costate``
    (realization-mean costate, filled by the backward sweep) and
    ``controls (..., N+1, K, d_u)``.
    """

    grid: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    cxh: np.ndarray
    cxf: np.ndarray
    controls: np.ndarray
    costate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.costate is None:
            self.costate = np.full_like(self.means, np.nan)

    @property
    def K(self) -> int:
        return self.means.shape[-2]

    @property
    def N(self) -> int:
        return self.grid.size - 1


def least_squares_fit(x, gamma, ridge=0.0, prior=None):
    """Affine regression ``gamma_k ~ Lambda (x_k - xbar) + mu``.

    Returns ``mu = mean(gamma)`` and
    ``Lambda = prior + (C^{gx} - prior C^{xx}) (C^{xx} + ridge I)^{-1}``
    with 1/K covariances. ``prior=None`` is the zero matrix, i.e. plain
    ridge regression; a non-zero prior only matters in directions where the
    ``x_k`` carry no spread.
    """
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if x.shape[-2] < 2:
        raise ValueError("least_squares_fit needs at least two points")
    if x.shape[:-1] != gamma.shape[:-1]:
        raise ValueError(f"x {x.shape} and gamma {gamma.shape} disagree on the point count")
    ridge = np.asarray(ridge, dtype=float)
    if np.any(ridge < 0):
        raise ValueError("ridge must be non-negative")
    d = x.shape[-1]
    Cxx = cross_cov(x, x)
    Cxx = 0.5 * (Cxx + np.swapaxes(Cxx, -1, -2))
    Cgx = cross_cov(gamma, x)
    A = Cxx + ridge[..., None, None] * np.eye(d)
    w = np.linalg.eigvalsh(A)
    wmin, wmax = w[..., 0], w[..., -1]
    bad = (wmin <= 0) | (wmin <= _COND_FLOOR * wmax)
    if np.any(bad):
        raise SingularRegressionError(
            f"regression covariance is numerically singular (smallest eigenvalue {np.min(wmin):.3e})")
    B = Cgx if prior is None else Cgx - prior @ Cxx
    Lambda = np.swapaxes(np.linalg.solve(A, np.swapaxes(B, -1, -2)), -1, -2)
    if prior is not None:
        Lambda = Lambda + prior
    return Lambda, gamma.mean(axis=-2)


def default_ridge(C, rel=RIDGE_REL):
    d = C.shape[-1]
    return rel * np.trace(C, axis1=-2, axis2=-1) / d + _TINY


def statistical_jacobian_T(cov, cxf, rel=RIDGE_REL):
    """``(C + eps I)^{-1} C^{xf}``; equals ``A^T`` for linear drift ``A x + b``."""
    eps = default_ridge(cov, rel)
    return np.linalg.solve(cov + eps[..., None, None] * np.eye(cov.shape[-1]), cxf)


def backward_regression_step(means_next, cov_next, cxf_next, costate_next, means_now,
                             model: ModelSpec, cost: QuadraticCost, dt: float,
                             ridge_rel=RIDGE_REL, prior=None, symmetrize=False):
    """One backward step from node ``n+1`` to node ``n``.

    Returns ``(Lambda_n, lambda_n, costate_n)`` where ``costate_n`` is the
    fitted law evaluated at the forward means ``means_now``.
    """
    GGt = model.control_matrix @ model.control_matrix.T
    J = statistical_jacobian_T(cov_next, cxf_next, ridge_rel)
    gamma = (costate_next + dt * np.einsum("...ij,...j->...i", J, costate_next)
             + dt * cost.grad(means_next))
    # noise-free back integration of the realization means
    x_back = means_next - dt * (model.drift(means_next) - costate_next @ GGt.T)
    x_center = x_back.mean(axis=-2)
    Cxx = cross_cov(x_back, x_back)
    Lambda, mu = least_squares_fit(x_back, gamma, default_ridge(Cxx, ridge_rel), prior)
    if symmetrize:
        Lambda = 0.5 * (Lambda + np.swapaxes(Lambda, -1, -2))
    lam = mu - np.einsum("...ij,...j->...i", Lambda, x_center)
    costate_now = np.einsum("...ij,...kj->...ki", Lambda, means_now) + lam[..., None, :]
    return Lambda, lam, costate_now


def regression_residual(bundle: RealizationBundle, schedule: GainSchedule, model: ModelSpec,
                        cost: QuadraticCost, ridge_rel=RIDGE_REL) -> float:
    """Largest normalized violation of the regression normal equations.

    At every node the fitted ``(Lambda, lambda)`` with prior ``P`` (the
    following slope) and ridge ``eps`` satisfy
    ``C^{gx} - Lambda C^{xx} = eps (Lambda - P)`` and
    ``mean(gamma) = Lambda mean(x) + lambda``; without a ridge the first is
    the orthogonality of the residuals to the regressors. Recomputes the
    regression data from ``bundle`` (whose costate must be the one produced
    with ``schedule``) and returns the worst relative residual. Not
    meaningful for symmetrized gains.
    """
    worst = 0.0
    for n in range(bundle.N):
        means_next = bundle.means[..., n + 1, :, :]
        Y = bundle.costate[..., n + 1, :, :]
        GGt = model.control_matrix @ model.control_matrix.T
        J = statistical_jacobian_T(bundle.cov[..., n + 1, :, :, :], bundle.cxf[..., n + 1, :, :, :], ridge_rel)
        dt = bundle.grid[n + 1] - bundle.grid[n]
        gamma = Y + dt * np.einsum("...ij,...j->...i", J, Y) + dt * cost.grad(means_next)
        x = means_next - dt * (model.drift(means_next) - Y @ GGt.T)
        L, P, lam = schedule.Lambda[..., n, :, :], schedule.Lambda[..., n + 1, :, :], schedule.lam[..., n, :]
        Cxx = cross_cov(x, x)
        Cgx = cross_cov(gamma, x)
        eps = default_ridge(Cxx, ridge_rel)[..., None, None]
        res = Cgx - L @ Cxx - eps * (L - P)
        scale = (np.linalg.norm(Cgx, axis=(-2, -1)) + np.linalg.norm(L, axis=(-2, -1))
                 * np.linalg.norm(Cxx, axis=(-2, -1)) + _TINY)
        worst = max(worst, float(np.max(np.linalg.norm(res, axis=(-2, -1)) / scale)))
        mres = gamma.mean(axis=-2) - np.einsum("...ij,...j->...i", L, x.mean(axis=-2)) - lam
        mscale = (np.linalg.norm(gamma.mean(axis=-2), axis=-1) + np.linalg.norm(lam, axis=-1)
                  + np.linalg.norm(L, axis=(-2, -1)) * np.linalg.norm(x.mean(axis=-2), axis=-1) + _TINY)
        worst = max(worst, float(np.max(np.linalg.norm(mres, axis=-1) / mscale)))
    return worst


def terminal_costate(bundle: RealizationBundle, cost: QuadraticCost):
    bundle.costate[..., -1, :, :] = cost.terminal_grad(bundle.means[..., -1, :, :])
    return bundle.costate[..., -1, :, :]


def forward_sweep(X0, model: ModelSpec, dt: float, noise, schedule: GainSchedule | None = None) -> RealizationBundle:
    """Propagate ``K`` ensembles with the simulated-innovation EnKBF.

    ``X0`` has shape ``(..., K, M, d)`` and ``noise`` ``(..., K, N, d_y)``
    holds standard normal draws (scaled by ``sqrt(dt)`` here). Each
    realization is driven by the feedback law of ``schedule`` applied to
    its own mean; ``None`` means ``u = 0``. The per-step update is the one
    of :func:`enkbf_nmpc.filter.simulated_step`, fused with the moment
    computations.
    """
    X = np.ascontiguousarray(X0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    N = noise.shape[-2]
    grid = dt * np.arange(N + 1)
    lead = X.shape[:-3]
    K, M, d = X.shape[-3:]
    d_y, d_u = model.d_y, model.d_u
    E = int(np.prod(lead + (K,)))
    means = np.empty((N + 1, E, d))
    cov = np.empty((N + 1, E, d, d))
    cxf = np.empty_like(cov)
    cxh = np.empty((N + 1, E, d, d_y))
    controls = np.zeros((N + 1,) + lead + (K, d_u))
    # member-last storage; the model maps see (E, M, d) views of it
    XT = np.ascontiguousarray(np.swapaxes(X.reshape(E, M, d), 1, 2))
    XT_next = np.empty_like(XT)
    U = np.empty((E, d_u))
    G, Rinv, Rsqrt = model.control_matrix, model.obs_cov_inv, model.obs_cov_sqrt
    dW = np.sqrt(dt) * np.moveaxis(noise, -2, 0).reshape(N, E, d_y)
    dW = np.concatenate([dW, np.zeros((1, E, d_y))])
    L = np.zeros((E, d, d))
    lv = np.zeros((E, d))
    for n in range(N + 1):
        if schedule is not None and n < N:
            Ln, ln = schedule.interpolate(grid[n])
            L = np.ascontiguousarray(np.broadcast_to(Ln[..., None, :, :], lead + (K, d, d))).reshape(E, d, d)
            lv = np.ascontiguousarray(np.broadcast_to(ln[..., None, :], lead + (K, d))).reshape(E, d)
        elif n == N:
            L[:] = 0.0
            lv[:] = 0.0
        Xv = np.swapaxes(XT, 1, 2)
        FX = np.ascontiguousarray(np.swapaxes(model.drift(Xv), 1, 2), dtype=float)
        HX = np.ascontiguousarray(np.swapaxes(model.obs_map(Xv), 1, 2), dtype=float)
        moments_and_step(XT, FX, HX, L, lv, G, dW[n], Rinv, Rsqrt, dt,
                         means[n], cov[n], cxf[n], cxh[n], U, XT_next)
        if n == N:
            break
        controls[n] = U.reshape(lead + (K, d_u))
        if not np.all(np.isfinite(XT_next)):
            raise FilterDivergenceError(f"non-finite ensemble member at t={grid[n]:g}")
        XT, XT_next = XT_next, XT

    def node_major(a):
        a = a.reshape((N + 1,) + lead + (K,) + a.shape[2:])
        return np.moveaxis(a, 0, len(lead))

    return RealizationBundle(grid, node_major(means), node_major(cov), node_major(cxh), node_major(cxf),
                             np.moveaxis(controls, 0, len(lead)))


def backward_sweep(bundle: RealizationBundle, model: ModelSpec, cost: QuadraticCost,
                   ridge_rel=RIDGE_REL, symmetrize=False, compiled=True) -> GainSchedule:
    """Fill ``bundle.costate`` from the terminal condition down and return the gains.

    The last node carries the exact terminal law ``(V_T, -V_T c_T)``. Each
    regression is shrunk towards the slope of the following node.
    ``compiled=False`` runs :func:`backward_regression_step` node by node;
    the compiled sweep computes the same quantities in one pass.
    """
    if compiled:
        schedule = _backward_sweep_compiled(bundle, model, cost, ridge_rel, symmetrize)
        if schedule is not None:
            return schedule
    return _backward_sweep_reference(bundle, model, cost, ridge_rel, symmetrize)


def _backward_sweep_compiled(bundle, model, cost, ridge_rel, symmetrize):
    N = bundle.N
    batch = bundle.means.shape[:-3]
    K, d = bundle.means.shape[-2:]
    E = int(np.prod(batch, dtype=int))
    means = np.ascontiguousarray(bundle.means).reshape(E, N + 1, K, d)
    cov = np.ascontiguousarray(bundle.cov).reshape(E, N + 1, K, d, d)
    cxf = np.ascontiguousarray(bundle.cxf).reshape(E, N + 1, K, d, d)
    F = np.ascontiguousarray(model.drift(means))
    grad = np.ascontiguousarray(cost.grad(means))
    GGt = model.control_matrix @ model.control_matrix.T
    Lambda = np.empty((E, N + 1, d, d))
    lam = np.empty((E, N + 1, d))
    costate = np.empty((E, N + 1, K, d))
    Lambda[:, N] = cost.V_T
    lam[:, N] = -cost.V_T @ cost.c_T
    costate[:, N] = cost.terminal_grad(means[:, N])
    flags = backward_sweep_kernel(means, cov, cxf, F, grad, GGt, float(bundle.grid[1] - bundle.grid[0]),
                                  float(ridge_rel), _TINY, bool(symmetrize), _COND_FLOOR,
                                  Lambda, lam, costate)
    if np.any(flags):
        return None
    bundle.costate[...] = costate.reshape(bundle.costate.shape)
    return GainSchedule(bundle.grid.copy(), Lambda.reshape(batch + (N + 1, d, d)),
                        lam.reshape(batch + (N + 1, d)))


def _backward_sweep_reference(bundle, model, cost, ridge_rel, symmetrize):
    dt = bundle.grid[1] - bundle.grid[0]
    N = bundle.N
    batch = bundle.means.shape[:-3]
    d = bundle.means.shape[-1]
    Lambda = np.empty(batch + (N + 1, d, d))
    lam = np.empty(batch + (N + 1, d))
    Lambda[..., N, :, :] = cost.V_T
    lam[..., N, :] = -cost.V_T @ cost.c_T
    terminal_costate(bundle, cost)
    for n in range(N - 1, -1, -1):
        L, l, Y = backward_regression_step(
            bundle.means[..., n + 1, :, :], bundle.cov[..., n + 1, :, :, :], bundle.cxf[..., n + 1, :, :, :],
            bundle.costate[..., n + 1, :, :], bundle.means[..., n, :, :],
            model, cost, dt, ridge_rel, prior=Lambda[..., n + 1, :, :], symmetrize=symmetrize)
        Lambda[..., n, :, :] = L
        lam[..., n, :] = l
        bundle.costate[..., n, :, :] = Y
    return GainSchedule(bundle.grid.copy(), Lambda, lam)


@dataclass
class PicardIterate:
    bundle: RealizationBundle
    schedule: GainSchedule


def picard_iterate(X0, model: ModelSpec, cost: QuadraticCost, dt: float, noise, n_iter: int = 3,
                   schedule: GainSchedule | None = None, ridge_rel=RIDGE_REL, symmetrize=False,
                   keep_history=False):
    """Alternate forward and backward sweeps ``n_iter`` times.

    The same initial ensembles and noise are reused in every iteration, so
    the iteration is a deterministic fixed-point map. Returns the final
    schedule and, if ``keep_history``, the list of :class:`PicardIterate`.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    history = []
    for it in range(n_iter):
        bundle = forward_sweep(X0, model, dt, noise, schedule)
        schedule = backward_sweep(bundle, model, cost, ridge_rel, symmetrize)
        if not (np.all(np.isfinite(schedule.Lambda)) and np.all(np.isfinite(schedule.lam))):
            raise PicardDivergenceError(f"non-finite gains in Picard iteration {it + 1}")
        if keep_history:
            history.append(PicardIterate(bundle, schedule))
    return (schedule, history) if keep_history else schedule


def initial_ensembles(law: InitialLaw, M: int, K: int, streams):
    """One moment-matched ensemble, shared by all ``K`` realizations.

    Realizations differ only through their innovation noise. Independent
    member draws per realization would make the statistical Jacobian
    ``C^{-1} C^{xf}`` vary randomly across realizations through the
    higher sample moments, and that noise swamps the across-realization
    regression in the directions where the means carry little spread.
    """
    X = moment_matched(law.mean, law.cov, M, streams.generator("init"))
    return np.broadcast_to(X, (K,) + X.shape)


def realization_noise(K: int, N: int, d_y: int, streams):
    return np.stack([streams.normal((N, d_y), "innovation", k) for k in range(K)])


def picard_solve(model: ModelSpec, cost: QuadraticCost, law: InitialLaw, T: float, dt: float,
                 M: int = 50, K: int = 50, n_iter: int = 3, rng=None, ridge_rel=RIDGE_REL,
                 symmetrize=False, keep_history=False):
    """Gain schedule on ``[0, T]`` for a problem starting from ``law``.

    ``rng`` is an :class:`~enkbf_nmpc.rng.RngStreams` or an integer seed.
    """
    N = int(round(T / dt))
    if N < 1 or not np.isclose(N * dt, T):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    streams = as_streams(rng)
    X0 = initial_ensembles(law, M, K, streams)
    noise = realization_noise(K, N, model.d_y, streams)
    return picard_iterate(X0, model, cost, dt, noise, n_iter, None, ridge_rel, symmetrize, keep_history)
