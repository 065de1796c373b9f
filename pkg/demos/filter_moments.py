"""Ensemble Kalman-Bucy filter against the exact Kalman-Bucy moments.

With a linear model the deterministic EnKBF propagates its empirical mean
and covariance by the same equations as the Kalman-Bucy filter, so the
only error is the time discretization. Halving the step should halve the
error. The data are the noise-free observations of a known trajectory.

    python demos/filter_moments.py
"""
import numpy as np

from enkbf_nmpc import InitialLaw, LtiSpec, RngStreams
from enkbf_nmpc.harness.experiments import filter_moment_errors

lti = LtiSpec(A=[[0.0, 1.0], [0.0, 0.0]], b=[0.0, 0.0], G=[[0.0], [1.0]], H=[[1.0, 0.0]], R=[[1.0]])
law = InitialLaw([1.0, 0.0], np.eye(2))
x_truth0 = law.mean + 1.0   # the truth starts one standard deviation away from the prior mean
streams = RngStreams(0)

print(f"{'dt':>8} {'mean error':>12} {'cov error':>12}")
prev = None
for dt in (0.02, 0.01, 0.005, 0.0025):
    # M = 8 members is plenty: in the linear case the ensemble size does not enter the moment equations.
    em, ec, covs = filter_moment_errors(lti, law, 1.0, dt, 8, streams.generator("ensemble"), x_truth0)
    ratio = "" if prev is None else f"   ratios {em / prev[0]:.3f} {ec / prev[1]:.3f}"
    print(f"{dt:8.4f} {em:12.3e} {ec:12.3e}{ratio}")
    prev = (em, ec)

print("final posterior covariance:\n", np.array2string(covs[-1], precision=4))
