"""Relay steering and controllability experiments for SDEs with multiplicative noise."""

__version__ = "0.1.0"

from .core_math import SignRegularization, controllability_gramian, gamma_lower_bound, sign_smoothed
from .exceptions import (
    DivergenceError,
    HypothesisError,
    InvalidInputError,
    NumericalError,
    RankDeficiencyError,
    RelaySteerError,
    ShapeError,
    TailBoundError,
    UnsupportedConfigurationError,
)
from .monte_carlo import EnsembleReport, run_ensemble, verify_bound
from .relay_control import (
    BoundConstants,
    bound_constants,
    relay_feedback,
    rho_for_confidence,
    success_probability_lower_bound,
)
from .scenario import DiffusionSpec, MatrixFunction, Scenario, SolverOptions, load_scenario, scenario_from_dict
from .sde_sim import BrownianPath, TimeGrid, integrate_closed_loop, integrate_open_loop, sample_brownian

__all__ = [
    "BoundConstants",
    "BrownianPath",
    "DiffusionSpec",
    "DivergenceError",
    "EnsembleReport",
    "HypothesisError",
    "InvalidInputError",
    "MatrixFunction",
    "NumericalError",
    "RankDeficiencyError",
    "RelaySteerError",
    "Scenario",
    "ShapeError",
    "SignRegularization",
    "SolverOptions",
    "TailBoundError",
    "TimeGrid",
    "UnsupportedConfigurationError",
    "bound_constants",
    "controllability_gramian",
    "gamma_lower_bound",
    "integrate_closed_loop",
    "integrate_open_loop",
    "load_scenario",
    "relay_feedback",
    "rho_for_confidence",
    "run_ensemble",
    "sample_brownian",
    "scenario_from_dict",
    "sign_smoothed",
    "success_probability_lower_bound",
    "verify_bound",
]
