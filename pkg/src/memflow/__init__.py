"""Simulation and verification toolkit for path-distribution dependent SDEs with fading memory."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .segment_path import (GridSpec, Trajectory, WeightedSegment, point_path, segment_at, shift_bound_check,  # noqa: F401
                           tau_norm, truncated_norm)
from .measure_flow import EmpiricalMeasure, EmpiricalMeasureFlow, flow_distance_theta, wasserstein  # noqa: F401
from .coefficients import CoefficientSet, builtin_model, check_assumption, evaluate  # noqa: F401
from .sde_engine import NoisePlan, exp_moment, moment_curve, simulate_frozen, simulate_interacting  # noqa: F401
from .picard import PicardConfig, contraction_report, solve_fixed_point  # noqa: F401
from .coupling import CouplingConfig, decay_fit, gradient_estimate_check, log_harnack_defect, run_coupling  # noqa: F401
