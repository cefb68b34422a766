"""Spectral Galerkin truncation of the controlled stochastic heat equation
on (0, 1) with Dirichlet conditions,

    dX - X'' dt = sum_j X e_j dbeta_j + 1_{(alpha, beta)} u dt,

in the sine basis ``e_j = sqrt(2) sin(j pi xi)``. The truncated system is

    dX^N + A_N X^N dt = sum_j S_j X^N dbeta_j + B_N u dt

with ``A_N = diag(j^2 pi^2)``, ``(B_N)_{ij} = int_alpha^beta e_i e_j`` and
``(S_j)_{ik} = <e_k e_j, e_i>``. All matrices are closed-form.
"""

from dataclasses import dataclass, field

import numpy as np

from .core_math import SignRegularization, as_vector
from .exceptions import HypothesisError, InvalidInputError
from .monte_carlo import _assemble, run_blocks, wilson_interval
from .relay_control import bound_constants, rho_for_confidence, success_probability_lower_bound
from .scenario import DiffusionSpec, Scenario, SolverOptions
from .sde_sim import TimeGrid

SQRT2 = np.sqrt(2.0)
RHO_CAP = 1e6
GAMMA_MIN = 1e-12


def eigenbasis_1d(N):
    """Dirichlet eigenvalues ``j^2 pi^2`` and descriptors of ``sqrt(2) sin(j pi xi)``."""
    if int(N) != N or N < 1:
        raise InvalidInputError("N must be a positive integer")
    j = np.arange(1, int(N) + 1)
    lambdas = (j * np.pi) ** 2
    return lambdas, [{"frequency": int(k), "normalization": float(SQRT2)} for k in j]


def eigenfunctions(N, xi):
    """Values ``e_j(xi)`` for ``j = 1..N``, shape ``(N, len(xi))``."""
    j = np.arange(1, N + 1)[:, None]
    return SQRT2 * np.sin(j * np.pi * np.asarray(xi, dtype=float)[None, :])


def _check_region(region):
    a, b = (float(v) for v in region)
    if not (0.0 <= a < b <= 1.0):
        raise InvalidInputError(f"control region must satisfy 0 <= alpha < beta <= 1, got {region}")
    if b - a < 1e-12:
        raise InvalidInputError("control region is degenerate")
    return a, b


def control_mass_matrix(region, N):
    """``(B_N)_{ij} = int_alpha^beta 2 sin(i pi xi) sin(j pi xi) dxi``."""
    a, b = _check_region(region)
    i = np.arange(1, N + 1)[:, None]
    j = np.arange(1, N + 1)[None, :]

    def prim(xi):
        diff = i - j
        same = diff == 0
        d_safe = np.where(same, 1, diff)
        first = np.where(same, xi, np.sin(diff * np.pi * xi) / (d_safe * np.pi))
        return first - np.sin((i + j) * np.pi * xi) / ((i + j) * np.pi)

    M = prim(b) - prim(a)
    return 0.5 * (M + M.T)


def _odd_integral(m):
    """``int_0^1 sin(m pi xi) dxi`` for integer arrays ``m``."""
    m = np.asarray(m)
    odd = (np.abs(m) % 2) == 1
    return np.where(odd, 2.0 / (np.pi * np.where(m == 0, 1, m)), 0.0)


def coupling_tensors(N, d):
    """Matrices ``S_j`` with ``(S_j)_{ik} = int_0^1 e_k e_j e_i``, ``j = 1..d``."""
    if d < 1:
        raise InvalidInputError("d must be >= 1")
    i = np.arange(1, N + 1)[:, None]
    k = np.arange(1, N + 1)[None, :]
    out = []
    for j in range(1, d + 1):
        val = (
            _odd_integral(k + j - i)
            + _odd_integral(j + i - k)
            + _odd_integral(i + k - j)
            - _odd_integral(i + j + k)
        )
        out.append(SQRT2 / 2 * val)
    return out


@dataclass(frozen=True, eq=False)
class GalerkinModel:
    N: int
    d: int
    control_region: tuple
    lambdas: np.ndarray
    B_N: np.ndarray
    couplings: list

    @classmethod
    def build(cls, N, d, control_region=(0.0, 1.0)):
        lambdas, _ = eigenbasis_1d(N)
        region = _check_region(control_region)
        return cls(int(N), int(d), region, lambdas, control_mass_matrix(region, N), coupling_tensors(N, d))

    @property
    def A_N(self):
        return np.diag(self.lambdas)

    @property
    def gamma(self):
        """Smallest singular value of ``B_N``."""
        return float(np.linalg.svd(self.B_N, compute_uv=False)[-1])


def project_function(x_func, N, nodes=2000):
    """Sine coefficients ``<x, e_j>`` by Gauss-Legendre quadrature on (0, 1)."""
    z, w = np.polynomial.legendre.leggauss(nodes)
    xi = 0.5 * (z + 1)
    vals = np.asarray(x_func(xi), dtype=float)
    return eigenfunctions(N, xi) @ (0.5 * w * vals)


def spectral_tail(x_func, N, nodes=2000):
    """``||x - P_N x||_2`` from ``||x||^2 - sum_j <x, e_j>^2``."""
    z, w = np.polynomial.legendre.leggauss(nodes)
    xi = 0.5 * (z + 1)
    vals = np.asarray(x_func(xi), dtype=float)
    total = float(np.sum(0.5 * w * vals * vals))
    c = project_function(x_func, N, nodes)
    return float(np.sqrt(max(total - float(c @ c), 0.0)))


def build_galerkin_scenario(x_coeffs, model, rho, T, solver=None):
    """Scenario for the truncated system with target 0."""
    x = as_vector(x_coeffs, "x_coeffs", dim=model.N)
    if model.gamma <= GAMMA_MIN:
        raise HypothesisError(f"B_N is numerically singular (gamma_N = {model.gamma:.3g})", hypothesis="ii")
    return Scenario(
        A=model.A_N,
        B=model.B_N,
        sigma=DiffusionSpec.linear(model.couplings),
        x=x,
        y=np.zeros(model.N),
        T=float(T),
        rho=float(rho),
        solver=solver or SolverOptions(),
    )


@dataclass
class HeatReport:
    feasible: bool
    N: int
    d: int
    control_region: tuple
    eps: float
    gamma_N: float
    rho: float
    rho_required: float
    T: float
    paths_run: int = 0
    successes: int = 0
    p_hat: float = float("nan")
    wilson_ci: tuple = (float("nan"), float("nan"))
    target: float = float("nan")
    verdict: str = "infeasible"
    bound_rhs: float = float("nan")
    p_extended: float = float("nan")
    p_terminal_window: float = float("nan")
    spectral_tail: float = None
    ensemble: object = None
    extras: dict = field(default_factory=dict)

    def summary(self):
        out = {
            k: getattr(self, k)
            for k in (
                "feasible", "N", "d", "eps", "gamma_N", "rho", "rho_required", "T", "paths_run",
                "successes", "p_hat", "target", "verdict", "bound_rhs", "p_extended",
                "p_terminal_window", "spectral_tail",
            )
        }
        out["control_region"] = list(self.control_region)
        out["wilson_ci"] = list(self.wilson_ci)
        out.update(self.extras)
        return out


def approximate_controllability_experiment(x_coeffs, model, eps, paths, seed, T=1.0, dt=1e-4,
                                           extension=0.2, rho_cap=RHO_CAP, x_func=None,
                                           workers=None, hold=True):
    """Estimate ``P(||X^N(t)|| <= eps on [tau, T])`` under the relay.

    The gain targets a hitting probability of at least ``1 - eps/2`` using
    the one-sided drift constant (``A_N`` is dissipative). Trajectories run
    to ``(1 + extension) T``; a success needs a hit by ``T`` and
    ``||X^N|| <= eps`` from the hit until the end of the run. Also reported:
    the same event restricted to ``[tau, T]`` is implied, and the fraction
    staying within ``eps`` on ``[T, (1 + extension) T]`` regardless of hitting.
    """
    if not 0 < eps < 1:
        raise InvalidInputError("eps must lie in (0, 1)")
    x = as_vector(x_coeffs, "x_coeffs", dim=model.N)
    base = build_galerkin_scenario(x, model, 1.0, T)
    consts = bound_constants(base, drift="log_norm")
    rho = rho_for_confidence(consts, x, base.y, T, 1 - eps / 2)
    tail = spectral_tail(x_func, model.N) if x_func is not None else None
    report = HeatReport(
        feasible=rho <= rho_cap, N=model.N, d=model.d, control_region=model.control_region,
        eps=float(eps), gamma_N=model.gamma, rho=float(min(rho, rho_cap)), rho_required=float(rho),
        T=float(T), target=1 - eps, spectral_tail=tail,
    )
    if not report.feasible:
        report.extras["diagnosis"] = (
            f"required gain {rho:.3g} exceeds the cap {rho_cap:.3g}; gamma_N = {model.gamma:.3g} "
            "is too small for this control region and mode count"
        )
        return report
    scenario = base.with_(rho=rho)
    K = int(round(T / dt))
    K_ext = int(round((1 + extension) * T / dt))
    grid = TimeGrid(K_ext * dt, K_ext)
    reg = SignRegularization.smoothed(rho * dt)
    hit_tol = 1e-4 * (1 + float(np.linalg.norm(x)))
    blocks = run_blocks(scenario, paths, seed, grid, reg, hit_tol, hold=hold, hit_until=T,
                        window_start=K, workers=workers)
    hit_idx = np.concatenate([b.hit_idx for b in blocks])
    post = np.concatenate([b.post_hit_max for b in blocks])
    window = np.concatenate([b.window_max for b in blocks])
    ok = ~np.concatenate([b.diverged for b in blocks])
    hit_by_T = (hit_idx >= 0) & (hit_idx <= K)
    success = ok & hit_by_T & (post <= eps)
    n_ok = int(ok.sum())
    s = int(success.sum())
    lo, hi = wilson_interval(s, n_ok)
    ens = _assemble(blocks, grid, scenario, seed, hit_tol, consts.C_star,
                    success_probability_lower_bound(consts, x, scenario.y, T, rho), hit_until=T)
    report.paths_run = n_ok
    report.successes = s
    report.p_hat = s / n_ok
    report.wilson_ci = (lo, hi)
    report.bound_rhs = ens.bound_rhs
    report.p_extended = report.p_hat
    report.p_terminal_window = float(np.mean(window[ok] <= eps))
    report.verdict = "satisfied" if hi >= report.target and lo >= report.target - 0.01 else (
        "violated" if hi < report.target else "inconclusive")
    report.ensemble = ens
    report.extras.update({"hits_by_T": int((ok & hit_by_T).sum()), "dt": dt, "extension": extension,
                          "hold": bool(hold), "hit_tol": hit_tol})
    return report
