"""Experiment runners: fixed-horizon solve, closed-loop runs, linear checks.

Each runner takes an :class:`ExperimentConfig`, writes its CSV time series
and a ``summary.json`` into the output directory, and returns an
:class:`ExperimentResult` with the scalar metrics and the pass/fail verdict.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .. import fbsde
from ..ensemble import covariance, moment_matched
from ..fbsde import GainSchedule, write_csv
from ..filter import assimilate_step
from ..model import InitialLaw, ModelSpec, QuadraticCost, pendulum_model
from ..mpc import MpcConfig, run_receding_horizon
from ..riccati import LtiSpec, integrate_riccati, kalman_bucy_moments
from ..rng import RngStreams
from .config import ConfigError, ExperimentConfig, save_config


@dataclass
class ExperimentResult:
    kind: str
    passed: bool
    metrics: dict
    files: list = field(default_factory=list)
    wall_time: float = 0.0

    def summary(self) -> dict:
        return {"kind": self.kind, "passed": self.passed, "wall_time_s": round(self.wall_time, 3),
                "metrics": self.metrics, "files": [str(f) for f in self.files]}


@dataclass
class Problem:
    model: ModelSpec
    cost: QuadraticCost
    law: InitialLaw
    lti: LtiSpec | None = None


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Model, cost and initial law described by ``cfg``."""
    try:
        if cfg.model == "pendulum":
            model = pendulum_model(cfg.gamma, cfg.obs_cov, cfg.twin_noise)
            lti = None
        else:
            H = np.atleast_2d(np.asarray(cfg.H, dtype=float))
            lti = LtiSpec(cfg.A, cfg.b, cfg.G, H, cfg.obs_cov * np.eye(H.shape[0]))
            model = lti.to_model(cfg.twin_noise)
        d = model.d_x
        cost = QuadraticCost(cfg.cost_weight * np.eye(d), np.asarray(cfg.target, dtype=float),
                             cfg.terminal_weight * np.eye(d), np.asarray(cfg.terminal_target, dtype=float))
        law = InitialLaw(np.asarray(cfg.init_mean, dtype=float), cfg.init_var * np.eye(d))
    except ValueError as exc:
        raise ConfigError(f"inconsistent model or cost parameters: {exc}") from exc
    if law.dim != d:
        raise ConfigError(f"init_mean has {law.dim} components, the model has {d}")
    return Problem(model, cost, law, lti)


def covariance_invariants(covs) -> dict:
    """Largest asymmetry and smallest eigenvalue over a stack of covariance matrices."""
    covs = np.asarray(covs, dtype=float)
    asym = float(np.max(np.abs(covs - np.swapaxes(covs, -1, -2)), initial=0.0))
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return {"cov_max_asymmetry": asym, "cov_min_eigenvalue": float(np.min(np.linalg.eigvalsh(sym)))}


def _finish(cfg, out, result, t0, quiet=True):
    result.wall_time = time.perf_counter() - t0
    save_config(cfg, out / "config.ini")
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    if not quiet:
        print(json.dumps(result.summary()["metrics"], indent=2, sort_keys=True))
    return result


def _prepare(cfg, kinds, out_dir):
    if cfg.kind not in kinds:
        raise ConfigError(f"experiment kind {cfg.kind!r} does not match this runner ({', '.join(kinds)})")
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rel_sup_change(new, old):
    scale = np.max(np.abs(new))
    diff = np.max(np.abs(new - old))
    return float(diff / scale) if scale > 0 else float(diff)


def run_fixed_horizon_experiment(cfg: ExperimentConfig, out_dir=None, quiet=True) -> ExperimentResult:
    """Picard solve over one horizon from the initial law.

    Writes, for every Picard iteration ``i``, the quantiles over the ``K``
    realizations of the realization means (``fan_iter{i}.csv``), the gain
    schedule (``gains_iter{i}.csv``) and the feedback matrix ``G^T Lambda``
    (``feedback_iter{i}.csv``). Passes when the gains are finite and the
    last two iterations differ by less than ``convergence_tol`` in relative
    sup norm.
    """
    t0 = time.perf_counter()
    out = _prepare(cfg, ("fixed-horizon",), out_dir)
    prob = build_problem(cfg)
    G = prob.model.control_matrix
    _, history = fbsde.picard_solve(prob.model, prob.cost, prob.law, cfg.horizon, cfg.dt, cfg.M, cfg.K,
                                    cfg.n_iter, RngStreams(cfg.seed), cfg.ridge_rel, cfg.symmetrize,
                                    keep_history=True)
    files, feedback, inv = [], [], []
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    d, d_u = prob.model.d_x, prob.model.d_u
    for i, it in enumerate(history, start=1):
        grid, means = it.bundle.grid, it.bundle.means
        cols, data = ["t"], [grid]
        for j in range(d):
            q = np.quantile(means[..., j], qs, axis=-1)
            cols += [f"mean_{j}"] + [f"q{int(100 * p):02d}_{j}" for p in qs]
            data += [np.sort(means[..., j], axis=-1).mean(axis=-1)] + list(q)
        files.append(out / f"fan_iter{i}.csv")
        write_csv(files[-1], cols, np.column_stack(data))
        files.append(out / f"gains_iter{i}.csv")
        it.schedule.to_csv(files[-1])
        F = it.schedule.feedback_gain(G)
        feedback.append(F)
        files.append(out / f"feedback_iter{i}.csv")
        write_csv(files[-1], ["t"] + [f"GtLambda_{a}_{b}" for a in range(d_u) for b in range(d)],
                  np.column_stack([grid, F.reshape(len(grid), -1)]))
        inv.append(covariance_invariants(it.bundle.cov))
    changes = [_rel_sup_change(feedback[i], feedback[i - 1]) for i in range(1, len(feedback))]
    finite = all(np.all(np.isfinite(it.schedule.Lambda)) and np.all(np.isfinite(it.schedule.lam))
                 for it in history)
    last = history[-1]
    metrics = {
        "iteration_rel_change": changes,
        "final_rel_change": changes[-1] if changes else None,
        "gains_finite": bool(finite),
        "feedback_sup_norm": float(np.max(np.abs(feedback[-1]))),
        "regression_residual": fbsde.regression_residual(last.bundle, last.schedule, prob.model, prob.cost,
                                                         cfg.ridge_rel),
        "cov_max_asymmetry": max(v["cov_max_asymmetry"] for v in inv),
        "cov_min_eigenvalue": min(v["cov_min_eigenvalue"] for v in inv),
    }
    passed = finite and (not changes or changes[-1] < cfg.convergence_tol)
    return _finish(cfg, out, ExperimentResult(cfg.kind, bool(passed), metrics, files), t0, quiet)


def mpc_config(cfg: ExperimentConfig) -> MpcConfig:
    try:
        return MpcConfig(horizon=cfg.horizon, replan_interval=cfg.replan_interval, dt=cfg.dt, M=cfg.M, K=cfg.K,
                         n_iter=cfg.n_iter, ridge_rel=cfg.ridge_rel, duration=cfg.duration,
                         warm_start=cfg.warm_start, symmetrize=cfg.symmetrize, truth_init=cfg.truth_init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _order_free_stats(values):
    """Mean and variance over axis 0, summed in sorted order.

    Sorting first makes the result independent of the order of the
    repetitions, bit for bit.
    """
    v = np.sort(values, axis=0)
    mean = v.sum(axis=0) / v.shape[0]
    dev = np.sort((values - mean) ** 2, axis=0)
    return mean, dev.sum(axis=0) / v.shape[0]


def run_mpc_experiment(cfg: ExperimentConfig, out_dir=None, quiet=True) -> ExperimentResult:
    """Closed-loop runs for ``cfg.repetitions`` independent repetitions.

    Writes one log per repetition (``reps/rep_XXXX.csv``) and
    ``aggregate.csv`` with the across-repetition mean and variance of each
    filter-mean and true state component, plus the mean absolute filter-mean
    component. Passes when the mean absolute filter-mean of component 0 at
    the final time is at most ``stabilization_frac`` times its initial value.
    """
    t0 = time.perf_counter()
    out = _prepare(cfg, ("mpc",), out_dir)
    prob = build_problem(cfg)
    mcfg = mpc_config(cfg)
    streams = RngStreams(cfg.seed)
    rep_dir = out / "reps"
    rep_dir.mkdir(exist_ok=True)
    files, means, truths, inv = [], [], [], []
    for start in range(0, cfg.repetitions, cfg.batch_size):
        reps = range(start, min(start + cfg.batch_size, cfg.repetitions))
        log = run_receding_horizon(prob.model, prob.cost, prob.law, mcfg, streams, reps)
        for b, r in enumerate(reps):
            files.append(rep_dir / f"rep_{r:04d}.csv")
            log.to_csv(files[-1], b)
        means.append(log.mean)
        truths.append(log.x_true)
        inv.append(covariance_invariants(log.cov))
        if not quiet:
            print(f"repetitions {reps.start}..{reps.stop - 1} done ({time.perf_counter() - t0:.1f} s)")
    t = log.t
    means = np.concatenate(means)
    truths = np.concatenate(truths)
    m_avg, m_var = _order_free_stats(means)
    a_avg, _ = _order_free_stats(np.abs(means))
    x_avg, x_var = _order_free_stats(truths)
    d = prob.model.d_x
    cols = ["t"]
    for j in range(d):
        cols += [f"mean_{j}_avg", f"mean_{j}_var", f"abs_mean_{j}_avg", f"x_true_{j}_avg", f"x_true_{j}_var"]
    data = np.column_stack([t] + [c for j in range(d)
                                  for c in (m_avg[:, j], m_var[:, j], a_avg[:, j], x_avg[:, j], x_var[:, j])])
    files.append(out / "aggregate.csv")
    write_csv(files[-1], cols, data)
    threshold = cfg.stabilization_frac * abs(cfg.init_mean[0])
    metrics = {
        "repetitions": cfg.repetitions,
        "final_time": float(t[-1]),
        "final_abs_mean_0": float(a_avg[-1, 0]),
        "final_mean_0": float(m_avg[-1, 0]),
        "final_var_mean_0": float(m_var[-1, 0]),
        "final_var_x_true_0": float(x_var[-1, 0]),
        "stabilization_threshold": threshold,
        "cov_max_asymmetry": max(v["cov_max_asymmetry"] for v in inv),
        "cov_min_eigenvalue": min(v["cov_min_eigenvalue"] for v in inv),
    }
    passed = bool(a_avg[-1, 0] <= threshold)
    return _finish(cfg, out, ExperimentResult(cfg.kind, passed, metrics, files), t0, quiet)


def _require_linear(cfg, prob):
    if prob.lti is None:
        raise ConfigError(f"{cfg.kind} needs model = linear")


def _truth_path(lti: LtiSpec, x0, grid):
    """Exact uncontrolled trajectory of ``x' = A x + b`` on ``grid``."""
    d = lti.d_x
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d], aug[:d, d] = lti.A, lti.b
    z0 = np.append(x0, 1.0)
    return np.stack([(expm(aug * t) @ z0)[:d] for t in grid])


def filter_moment_errors(lti: LtiSpec, law: InitialLaw, T: float, dt: float, M: int, rng, x_truth0):
    """Sup-norm errors of the EnKBF mean and covariance against the Kalman-Bucy moments.

    The data path is the noise-free ``dY = H x_truth(t) dt`` of the exact
    uncontrolled trajectory started at ``x_truth0``; the ensemble is
    moment-matched to ``law``. Returns ``(mean_error, cov_error, covs)``
    where ``covs`` are the ensemble covariances on the grid.
    """
    model = lti.to_model()
    N = int(round(T / dt))
    grid = dt * np.arange(N + 1)
    rate = lambda t: lti.H @ _truth_path(lti, x_truth0, [t])[0]
    _, m_ref, C_ref = kalman_bucy_moments(lti, law, T, dt, obs_rate=rate)
    path = _truth_path(lti, x_truth0, grid)
    X = moment_matched(law.mean, law.cov, M, rng)
    u = np.zeros(model.d_u)
    covs = np.empty((N + 1, lti.d_x, lti.d_x))
    covs[0] = covariance(X)
    em = np.max(np.abs(X.mean(axis=0) - m_ref[0]))
    ec = np.linalg.norm(covs[0] - C_ref[0])
    for n in range(N):
        X = assimilate_step(X, model, u, lti.H @ path[n] * dt, dt, grid[n])
        covs[n + 1] = covariance(X)
        em = max(em, np.linalg.norm(X.mean(axis=0) - m_ref[n + 1]))
        ec = max(ec, np.linalg.norm(covs[n + 1] - C_ref[n + 1]))
    return float(em), float(ec), covs


def run_linear_consistency_check(cfg: ExperimentConfig, out_dir=None, quiet=True) -> ExperimentResult:
    """Compare the ensemble methods with their linear-Gaussian reference solutions.

    ``riccati-check``: the Picard gains against the Riccati schedule, sup
    over the grid of the Frobenius error of ``Lambda`` and the Euclidean
    error of ``lambda`` (tolerances ``gain_tol`` and ``offset_tol``).

    ``filter-check``: EnKBF moment errors at ``dt`` and ``dt/2``; passes
    when the error ratio of both the mean and the covariance lies within
    ``0.5 (1 +- rate_band)``, i.e. first-order convergence.
    """
    t0 = time.perf_counter()
    out = _prepare(cfg, ("riccati-check", "filter-check"), out_dir)
    prob = build_problem(cfg)
    _require_linear(cfg, prob)
    lti = prob.lti
    streams = RngStreams(cfg.seed)
    files = []
    if cfg.kind == "riccati-check":
        sched, history = fbsde.picard_solve(prob.model, prob.cost, prob.law, cfg.horizon, cfg.dt, cfg.M, cfg.K,
                                            cfg.n_iter, streams, cfg.ridge_rel, cfg.symmetrize, keep_history=True)
        ref = integrate_riccati(lti, prob.cost, cfg.horizon, cfg.dt)
        err_L = np.linalg.norm(sched.Lambda - ref.Lambda, axis=(-2, -1))
        err_l = np.linalg.norm(sched.lam - ref.lam, axis=-1)
        for name, s in (("gains_ensemble.csv", sched), ("gains_riccati.csv", ref)):
            files.append(out / name)
            s.to_csv(files[-1])
        files.append(out / "gain_errors.csv")
        write_csv(files[-1], ["t", "Lambda_frobenius_error", "lambda_error"], np.column_stack([sched.grid, err_L, err_l]))
        inv = covariance_invariants(np.concatenate([it.bundle.cov.reshape(-1, lti.d_x, lti.d_x) for it in history]))
        metrics = {"Lambda_sup_error": float(err_L.max()), "lambda_sup_error": float(err_l.max()),
                   "regression_residual": fbsde.regression_residual(history[-1].bundle, sched, prob.model,
                                                                    prob.cost, cfg.ridge_rel), **inv}
        passed = err_L.max() <= cfg.gain_tol and err_l.max() <= cfg.offset_tol
    else:
        x_truth0 = prob.law.mean + np.sqrt(cfg.init_var)
        rows, all_covs = [], []
        for level, h in enumerate((cfg.dt, cfg.dt / 2)):
            em, ec, covs = filter_moment_errors(lti, prob.law, cfg.horizon, h, cfg.M,
                                                streams.generator("filter-check", level), x_truth0)
            rows.append((h, em, ec))
            all_covs.append(covs)
        rows = np.array(rows)
        files.append(out / "filter_errors.csv")
        write_csv(files[-1], ["dt", "mean_error", "cov_error"], rows)
        ratio_m, ratio_c = rows[1, 1] / rows[0, 1], rows[1, 2] / rows[0, 2]
        lo, hi = 0.5 * (1 - cfg.rate_band), 0.5 * (1 + cfg.rate_band)
        metrics = {"mean_error": rows[:, 1].tolist(), "cov_error": rows[:, 2].tolist(),
                   "mean_error_ratio": float(ratio_m), "cov_error_ratio": float(ratio_c),
                   "mean_error_constant": float(rows[0, 1] / cfg.dt), "cov_error_constant": float(rows[0, 2] / cfg.dt),
                   **covariance_invariants(np.concatenate(all_covs))}
        passed = lo <= ratio_m <= hi and lo <= ratio_c <= hi
    return _finish(cfg, out, ExperimentResult(cfg.kind, bool(passed), metrics, files), t0, quiet)


RUNNERS = {
    "fixed-horizon": run_fixed_horizon_experiment,
    "mpc": run_mpc_experiment,
    "riccati-check": run_linear_consistency_check,
    "filter-check": run_linear_consistency_check,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None, quiet=True) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg, out_dir, quiet)
