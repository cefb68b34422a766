"""Relay feedback, hold-mode selection and the hitting-probability bound.

The bound implemented is

    P(tau > T) <= C/(rho*gamma) * (1 - exp(-C*T))^{-1} |x - y| + C_y/(rho*gamma) |y|

where ``C`` multiplies the tracking error and ``C_y`` the target offset. With
``C = C_y = sup ||A(t)||`` this is the classical form; ``drift="log_norm"``
replaces ``C`` by the one-sided Lipschitz constant of ``-A``, which is
sharper (and still valid) for dissipative drifts.
"""

from dataclasses import dataclass

import numpy as np

from .core_math import as_vector, gamma_lower_bound, log_norm, sign_smoothed, yosida_sign_band
from .exceptions import HypothesisError, InvalidInputError
from .scenario import DEFAULT_T_SAMPLES

C_STAR_FLOOR = 1e-8
RHO_MIN = 1e-6


@dataclass(frozen=True)
class BoundConstants:
    C_star: float
    gamma: float
    C_offset: float = None

    def __post_init__(self):
        if not (self.C_star > 0 and self.gamma > 0):
            raise InvalidInputError("C_star and gamma must be positive")
        if self.C_offset is None:
            object.__setattr__(self, "C_offset", self.C_star)

    @property
    def eta(self):
        return self.gamma / self.C_star


def regularization_band(reg, scenario, t=0.0):
    """Smoothing width used by the relay at time ``t``."""
    if reg.kind == "smoothed":
        return reg.param
    return yosida_sign_band(scenario.B(t), reg.param, scenario.rho)


def relay_feedback(t, X, scenario, reg):
    """``-rho * sign_reg(B(t)^T (X - y))``; works on batches of states."""
    B = scenario.B(t)
    v = (np.asarray(X, dtype=float) - scenario.y) @ B
    return -scenario.rho * sign_smoothed(v, regularization_band(reg, scenario, t))


def hold_control(t, scenario):
    """Equivalent control that keeps ``X = y`` at rest, or ``None`` if ``|u| > rho``.

    Solves ``B(t) u = A(t) y`` in the minimum-norm sense.
    """
    B = scenario.B(t)
    rhs = scenario.A(t) @ scenario.y
    u = B.T @ np.linalg.solve(B @ B.T, rhs)
    if np.linalg.norm(u) > scenario.rho * (1 + 1e-12):
        return None
    return u


def bound_constants(scenario, t_samples=DEFAULT_T_SAMPLES, drift="norm"):
    """Estimate ``(C*, gamma)`` by sampling ``A(t)``, ``B(t)`` on ``[0, T]``.

    ``drift="norm"`` gives ``C* = sup ||A(t)||``. ``drift="log_norm"`` keeps
    ``sup ||A(t)||`` for the target-offset term but uses
    ``sup mu(-A(t))`` (floored) for the tracking term.
    """
    if t_samples < 2:
        raise InvalidInputError("t_samples must be >= 2")
    ts = scenario.sample_times(t_samples)
    norm_A = max(np.linalg.norm(scenario.A(t), 2) for t in ts)
    gamma = min(gamma_lower_bound(scenario.B(t)) for t in ts)
    if gamma <= 0:
        raise HypothesisError("gamma_lower_bound(B) = 0: hypothesis (ii) fails", hypothesis="ii")
    C_off = max(norm_A, C_STAR_FLOOR)
    if drift == "norm":
        return BoundConstants(C_off, gamma)
    if drift == "log_norm":
        mu = max(log_norm(-scenario.A(t)) for t in ts)
        return BoundConstants(max(mu, C_STAR_FLOOR), gamma, C_off)
    raise InvalidInputError(f"unknown drift constant {drift!r}")


def _horizon_factor(C, T):
    """``C / (1 - exp(-C T))`` with its ``C -> 0`` limit ``1/T``."""
    if C * T < 1e-6:
        return 1.0 / T + C / 2.0
    return C / -np.expm1(-C * T)


def failure_probability_bound(consts, x, y, T, rho):
    """Upper bound on ``P(tau > T)``, unclamped."""
    dist = np.linalg.norm(as_vector(x) - as_vector(y))
    ynorm = np.linalg.norm(as_vector(y))
    if rho <= 0:
        return np.inf if dist + ynorm > 0 else 0.0
    return (_horizon_factor(consts.C_star, T) * dist + consts.C_offset * ynorm) / (rho * consts.gamma)


def success_probability_lower_bound(consts, x, y, T, rho):
    """Lower bound on ``P(tau <= T)`` clamped to ``[0, 1]``."""
    if not rho > 0:
        raise InvalidInputError("rho must be positive")
    return float(min(1.0, max(0.0, 1.0 - failure_probability_bound(consts, x, y, T, rho))))


def rho_for_confidence(consts, x, y, T, p_target):
    """Smallest rho whose success bound reaches ``p_target``."""
    if not 0 <= p_target < 1:
        raise InvalidInputError("p_target must be in [0, 1)")
    numer = failure_probability_bound(consts, x, y, T, 1.0)
    rho = numer / (1.0 - p_target)
    return float(max(rho, RHO_MIN))
