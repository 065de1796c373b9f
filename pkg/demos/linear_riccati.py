"""Ensemble feedback gains for a double integrator, checked against Riccati.

For a linear system with quadratic cost the backward regression should
reproduce the solution of the Riccati equation, because the costate of
every realization is exactly affine in its filter mean. This script solves
the control problem both ways and prints the gap at a few times.

    python demos/linear_riccati.py
"""
import time

import numpy as np

from enkbf_nmpc import InitialLaw, LtiSpec, QuadraticCost, integrate_riccati, picard_solve

# x = (position, velocity), u is a force, only the position is observed.
lti = LtiSpec(A=[[0.0, 1.0], [0.0, 0.0]], b=[0.0, 0.0], G=[[0.0], [1.0]], H=[[1.0, 0.0]], R=[[1.0]])
cost = QuadraticCost.isotropic(2, weight=1.0, terminal_weight=1.0)
law = InitialLaw([1.0, 0.0], np.eye(2))
T, dt = 1.0, 1e-3

t0 = time.perf_counter()
ens = picard_solve(lti.to_model(), cost, law, T, dt, M=64, K=64, n_iter=3, rng=0)
print(f"ensemble solve: {time.perf_counter() - t0:.2f} s")
ref = integrate_riccati(lti, cost, T, dt)

print(f"{'t':>5} {'|Lambda - P|_F':>15} {'|lambda - p|':>13}   Lambda(t) from the ensemble")
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    L_e, l_e = ens.interpolate(t)
    L_r, l_r = ref.interpolate(t)
    print(f"{t:5.2f} {np.linalg.norm(L_e - L_r):15.2e} {np.linalg.norm(l_e - l_r):13.2e}   "
          f"{np.array2string(L_e, precision=3).replace(chr(10), '')}")

# The feedback applied to the filter mean is u = -G^T (Lambda xbar + lambda).
K0 = ens.feedback_gain(lti.G)[0]
print("state-feedback gain at t = 0:", np.array2string(K0, precision=3))
