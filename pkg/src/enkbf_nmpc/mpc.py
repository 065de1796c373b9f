"""Receding-horizon EnKBF-NMPC twin experiment.

A physical twin (the "truth") is controlled by the feedback law computed
from the digital twin, an EnKBF assimilating noisy observations of the
truth. Every ``replan_interval`` the FBSDE problem over the next ``horizon``
is re-solved starting from the current filter ensemble.

Independent repetitions run side by side along a leading batch axis; each
repetition draws its randomness from its own keyed streams, so its result
does not depend on which other repetitions share the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import covariance, moment_matched
from .fbsde import RIDGE_REL, GainSchedule, picard_iterate, write_csv
from .filter import assimilate_step
from .model import InitialLaw, ModelSpec, QuadraticCost, control_law
from .rng import as_streams


class TwinDivergenceError(FloatingPointError):
    pass


def _n_steps(span, dt, what):
    n = int(round(span / dt))
    if n < 1 or not np.isclose(n * dt, span, rtol=0, atol=1e-9 * max(1.0, span)):
        raise ValueError(f"{what}={span} is not a positive integer multiple of dt={dt}")
    return n


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 0.5
    replan_interval: float = 0.05
    dt: float = 1e-3
    M: int = 50
    K: int = 50
    n_iter: int = 3
    ridge_rel: float = RIDGE_REL
    duration: float = 2.0
    warm_start: bool = True
    symmetrize: bool = False
    truth_init: str = "sample"

    def __post_init__(self):
        if self.truth_init not in ("mean", "sample"):
            raise ValueError(f"truth_init must be 'mean' or 'sample', got {self.truth_init!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.M, self.K, self.n_iter) < 1 or self.K < 2 or self.M < 2:
            raise ValueError("M and K must be at least 2 and n_iter at least 1")
        if self.replan_interval > self.horizon:
            raise ValueError("replan_interval must not exceed the horizon")
        _n_steps(self.horizon, self.dt, "horizon")
        _n_steps(self.replan_interval, self.dt, "replan_interval")
        _n_steps(self.duration, self.replan_interval, "duration")

    @property
    def horizon_steps(self) -> int:
        return _n_steps(self.horizon, self.dt, "horizon")

    @property
    def replan_steps(self) -> int:
        return _n_steps(self.replan_interval, self.dt, "replan_interval")

    @property
    def n_replans(self) -> int:
        return _n_steps(self.duration, self.replan_interval, "duration")


@dataclass
class TwinState:
    x_true: np.ndarray
    ensemble: np.ndarray
    t: float = 0.0


@dataclass
class TrajectoryLog:
    """Time series on the ``dt`` grid, with a leading repetition axis.

    Row ``i`` holds the state at ``t[i]`` and the control applied over
    ``(t[i-1], t[i]]`` (zero in row 0). ``cost`` is ``0.5 |u|^2 + c(x_true)``.
    """

    t: np.ndarray
    x_true: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    replan_times: np.ndarray
    repetitions: tuple = (0,)

    def columns(self, d_x: int, d_u: int):
        return (["t"] + [f"x_true_{i}" for i in range(d_x)] + [f"mean_{i}" for i in range(d_x)]
                + [f"var_{i}" for i in range(d_x)] + [f"u_{i}" for i in range(d_u)] + ["running_cost"])

    def table(self, r: int = 0) -> np.ndarray:
        var = np.diagonal(self.cov[r], axis1=-2, axis2=-1)
        return np.column_stack([self.t, self.x_true[r], self.mean[r], var, self.u[r], self.cost[r]])

    def to_csv(self, path, r: int = 0) -> None:
        write_csv(path, self.columns(self.x_true.shape[-1], self.u.shape[-1]), self.table(r))


def physical_twin_step(x, model: ModelSpec, u, dB, dt: float):
    """Euler-Maruyama step of ``dX = (f(X) + G u) dt + sigma dB``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x_new = (x + dt * (model.drift(x) + np.asarray(u) @ model.control_matrix.T)
             + model.twin_noise_scale * np.asarray(dB))
    if not np.all(np.isfinite(x_new)):
        raise TwinDivergenceError("physical twin state became non-finite")
    return x_new


def observe_increment(x, model: ModelSpec, dW, dt: float):
    """``dY = h(x) dt + R^{1/2} dW``."""
    return model.obs_map(x) * dt + np.asarray(dW) @ model.obs_cov_sqrt.T


def interpolate_gain(schedule: GainSchedule, t: float):
    return schedule.interpolate(t)


def run_receding_horizon(model: ModelSpec, cost: QuadraticCost, law: InitialLaw, cfg: MpcConfig,
                         rng=None, repetitions=(0,)) -> TrajectoryLog:
    """Run the closed loop for each repetition index in ``repetitions``.

    The physical twin starts at a draw from ``law`` (``cfg.truth_init =
    "sample"``, the usual twin experiment) or at its mean (``"mean"``). Per repetition ``r`` the
    streams are: ``("truth", r)`` for that draw, ``("filter-init", r)`` for the initial ensemble,
    ``("innovation", r, j)`` for the FBSDE solve at replan ``j``, and
    ``("twin-obs", r, j)`` / ``("twin-noise", r, j)`` for the observation and
    model noise over replan interval ``j``.
    """
    streams = as_streams(rng)
    reps = tuple(int(r) for r in repetitions)
    B = len(reps)
    dt, d, d_y, d_u = cfg.dt, model.d_x, model.d_y, model.d_u
    Nh, Ns, J = cfg.horizon_steps, cfg.replan_steps, cfg.n_replans
    n_total = J * Ns
    sq = np.sqrt(dt)
    L_chol = np.linalg.cholesky(law.cov + 1e-300 * np.eye(d)) if np.any(law.cov) else np.zeros((d, d))

    if cfg.truth_init == "sample":
        x = np.stack([law.mean + L_chol @ streams.normal(d, "truth", r) for r in reps])
    else:
        x = np.tile(law.mean, (B, 1))
    ens = np.stack([moment_matched(law.mean, law.cov, cfg.M, streams.generator("filter-init", r)) for r in reps])

    t = dt * np.arange(n_total + 1)
    log_x = np.empty((B, n_total + 1, d))
    log_m = np.empty_like(log_x)
    log_C = np.empty((B, n_total + 1, d, d))
    log_u = np.zeros((B, n_total + 1, d_u))
    log_c = np.empty((B, n_total + 1))
    log_x[:, 0], log_m[:, 0], log_C[:, 0] = x, ens.mean(axis=-2), covariance(ens)
    log_c[:, 0] = cost.value(x)

    schedule = None
    for j in range(J):
        noise = np.stack([streams.normal((cfg.K, Nh, d_y), "innovation", r, j) for r in reps])
        X0 = np.broadcast_to(ens[:, None], (B, cfg.K) + ens.shape[1:])
        warm = schedule.shifted(Ns) if (cfg.warm_start and schedule is not None) else None
        schedule = picard_iterate(X0, model, cost, dt, noise, cfg.n_iter, warm, cfg.ridge_rel, cfg.symmetrize)
        obs_noise = np.stack([streams.normal((Ns, d_y), "twin-obs", r, j) for r in reps])
        if model.twin_noise_scale > 0:
            twin_noise = np.stack([streams.normal((Ns, d), "twin-noise", r, j) for r in reps])
        else:
            twin_noise = np.zeros((B, Ns, d))
        for s in range(Ns):
            i = j * Ns + s
            L, l = schedule.interpolate(s * dt)
            u = control_law(L, l, ens.mean(axis=-2), model.control_matrix)
            dY = observe_increment(x, model, sq * obs_noise[:, s], dt)
            x = physical_twin_step(x, model, u, sq * twin_noise[:, s], dt)
            ens = assimilate_step(ens, model, u, dY, dt, t=t[i])
            log_x[:, i + 1], log_m[:, i + 1], log_C[:, i + 1] = x, ens.mean(axis=-2), covariance(ens)
            log_u[:, i + 1] = u
            log_c[:, i + 1] = 0.5 * np.sum(u**2, axis=-1) + cost.value(x)
    return TrajectoryLog(t, log_x, log_m, log_C, log_u, log_c, cfg.replan_interval * np.arange(J), reps)
