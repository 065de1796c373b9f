"""Nonlinear model predictive control driven by ensemble Kalman-Bucy filters.

The optimal feedback for a partially observed control-affine system is
obtained from a forward-backward SDE whose forward part is an ensemble
Kalman-Bucy filter with simulated innovations, and whose backward part is
solved by regression on realization means. The resulting time-varying
affine gain schedule is applied in a receding-horizon loop.
"""
from .ensemble import covariance, cross_cov, empirical_mean, moment_matched, moment_matched_initial
from .fbsde import (GainSchedule, PicardDivergenceError, RealizationBundle, SingularRegressionError,
                    backward_sweep, forward_sweep, least_squares_fit, picard_iterate, picard_solve)
from .filter import FilterDivergenceError, FilterState, assimilate_step, simulated_step
from .model import InitialLaw, ModelSpec, QuadraticCost, control_law, linear_model, pendulum_model
from .mpc import MpcConfig, TrajectoryLog, run_receding_horizon
from .riccati import LtiSpec, RiccatiBlowUpError, integrate_riccati, kalman_bucy_moments
from .rng import RngStreams

__version__ = "0.1.0"
