"""A short receding-horizon twin experiment for the pendulum.

A physical twin evolves under the applied control and emits noisy angle
observations. The controller assimilates them with the EnKBF, replans the
gains every 0.05 time units over a 0.5 horizon (warm-started from the
previous plan), and applies u = -G^T (Lambda xbar + lambda) in between.

    python demos/receding_horizon.py [repetitions]
"""
import sys
import time

import numpy as np

from enkbf_nmpc import InitialLaw, MpcConfig, QuadraticCost, pendulum_model, run_receding_horizon

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 4
cost = QuadraticCost.isotropic(2, weight=50.0, terminal_weight=50.0)
law = InitialLaw([np.pi / 2, 0.0], 0.1 * np.eye(2))
# Smaller ensembles and a coarser step than the full runs, so this finishes quickly.
cfg = MpcConfig(horizon=0.5, replan_interval=0.05, dt=2e-3, M=30, K=30, n_iter=2, duration=2.0)

for R in (1.0, 0.1):
    model = pendulum_model(gamma=5.0, obs_cov=R)
    t0 = time.perf_counter()
    log = run_receding_horizon(model, cost, law, cfg, rng=0, repetitions=range(reps))
    print(f"\nR = {R}: {reps} repetitions in {time.perf_counter() - t0:.1f} s")
    for t in (0.0, 0.5, 1.0, 1.5, 2.0):
        n = int(round(t / cfg.dt))
        print(f"  t={t:3.1f}  true angle {np.mean(log.x_true[:, n, 0]):+.3f}"
              f"  filter mean {np.mean(log.mean[:, n, 0]):+.3f}"
              f"  filter var {np.mean(log.cov[:, n, 0, 0]):.4f}")
    print(f"  accumulated running cost: {np.mean(log.cost.sum(axis=1) * cfg.dt):.2f}")
    log.to_csv(f"receding_horizon_R{R}.csv", r=0)
