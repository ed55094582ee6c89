"""Piecewise-linear FitzHugh-Nagumo dynamics.

Deterministic oscillation structure, noise-driven exit densities on
phase-space cross-sections, and mixed-mode oscillation maps.
"""
from .params import (
    ModelParams,
    ValidationReport,
    epsilon_crit,
    eval_f_cubic,
    eval_f_pwl,
    validate,
)
from .flow import (
    NonConvergenceError,
    PeriodicOrbit,
    bifurcation_diagram,
    crossing_time,
    flow,
    integrate_orbit,
    lambda_1,
    lambda_v1,
    lambda_v1_approx,
    periodic_orbit,
    two_param_diagram,
    w_l_hat,
)

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "ValidationReport",
    "epsilon_crit",
    "eval_f_pwl",
    "eval_f_cubic",
    "validate",
    "NonConvergenceError",
    "PeriodicOrbit",
    "flow",
    "crossing_time",
    "integrate_orbit",
    "periodic_orbit",
    "bifurcation_diagram",
    "two_param_diagram",
    "lambda_v1",
    "lambda_1",
    "lambda_v1_approx",
    "w_l_hat",
    "__version__",
]
