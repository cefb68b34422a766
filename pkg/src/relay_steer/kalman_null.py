"""Exact null controllability for ``dX + A X dt = sigma X dbeta + B u dt``
under the Kalman rank condition, with ``sigma^2 = a sigma`` and
``range(sigma) ⊂ range(B)``.

With ``b(t) = beta(t) - a t / 2`` the fundamental solution collapses to
``Gamma(t) = exp(b(t) sigma) = I + g(b) sigma``, ``g(b) = (e^{ab} - 1)/a``,
and ``sigma D1(b) = g(b) sigma``. Two controllers are provided:

* :func:`composite_control` evaluates the open-loop correction
  ``u = u~ + B^+(sigma D y~ + sigma D1 B u~)`` along the deterministic plan.
* :func:`composite_feedback` re-plans the minimum-energy control over the
  remaining horizon at every step. Exact tracking of a fixed plan is not
  possible when ``m < n`` because ``(A sigma - sigma A) y`` generally
  leaves ``range(B)``; re-planning absorbs the unmatched part.
"""

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .core_math import (
    as_matrix,
    as_vector,
    check_gramian,
    controllability_gramian,
    controllability_matrix_rank,
    matrix_exp,
)
from .exceptions import (
    InvalidInputError,
    NumericalError,
    RankDeficiencyError,
    TailBoundError,
    UnsupportedConfigurationError,
)

POWER_TOL = 1e-10
RANGE_TOL = 1e-10
TERMINAL_TOL = 1e-8
DEFAULT_K = 20
TAIL_TARGET = 1e-10


@dataclass(frozen=True)
class KalmanHypothesesReport:
    rank: int
    rank_ok: bool
    sigma_power_ok: bool
    a: float
    range_ok: bool
    residuals: dict = field(default_factory=dict)

    @property
    def all_ok(self):
        return self.rank_ok and self.sigma_power_ok and self.range_ok


def check_hypotheses(A, B, sigma):
    """Rank condition, ``sigma^2 = a sigma`` and ``range(sigma) ⊂ range(B)``.

    ``sigma`` is a single ``n x n`` matrix or a one-element list of them.
    """
    if np.ndim(sigma) == 3 or (isinstance(sigma, (list, tuple)) and len(sigma) and np.ndim(sigma[0]) == 2):
        if len(sigma) != 1:
            raise UnsupportedConfigurationError(f"only d = 1 is supported, got d = {len(sigma)}")
        sigma = sigma[0]
    A = as_matrix(A, "A")
    n = A.shape[0]
    B = as_matrix(B, "B", rows=n)
    S = as_matrix(sigma, "sigma", rows=n, cols=n)
    _, rank = controllability_matrix_rank(A, B)
    S2 = S @ S
    ss = float(np.sum(S * S))
    a = float(np.sum(S2 * S) / ss) if ss > 0 else 0.0
    power_res = float(np.linalg.norm(S2 - a * S))
    snorm = float(np.linalg.norm(S, 2))
    proj = np.eye(n) - B @ np.linalg.pinv(B)
    range_res = float(np.linalg.norm(proj @ S))
    return KalmanHypothesesReport(
        rank=int(rank),
        rank_ok=rank == n,
        sigma_power_ok=power_res <= POWER_TOL * (1 + snorm**2),
        a=a,
        range_ok=range_res <= RANGE_TOL * (1 + snorm),
        residuals={"sigma_power": power_res, "range": range_res},
    )


@dataclass(frozen=True, eq=False)
class SteeringPlan:
    """Minimum-energy plan for ``dy/dt = -A y + B u``, ``y(0) = x``, ``y(T) = 0``.

    ``gains[k]`` maps a state at ``t_k`` to the first control of the
    discrete minimum-energy sequence reaching 0 at ``T`` for the Euler model
    ``y_{j+1} = (I - dt A) y_j + dt B u_j``.
    """

    grid: object
    u_det: np.ndarray
    gramian: np.ndarray
    y_det: np.ndarray
    truncation_K: int
    A: np.ndarray
    B: np.ndarray
    gains: np.ndarray

    @property
    def terminal_error(self):
        return float(np.linalg.norm(self.y_det[-1]))

    def energy(self):
        """``int |u~|^2 dt`` by the trapezoid rule on the grid."""
        e = np.sum(self.u_det**2, axis=1)
        return float(self.grid.dt * (e.sum() - 0.5 * (e[0] + e[-1])))


def _euler_gains(A, B, grid):
    n = A.shape[0]
    K, dt = grid.steps, grid.dt
    Phi = np.eye(n) - dt * A
    dB = dt * B
    gains = np.empty((K, B.shape[1], n))
    W = np.zeros((n, n))
    P = np.eye(n)  # Phi^(K-1-k)
    for k in range(K - 1, -1, -1):
        PB = P @ dB
        W = W + PB @ PB.T
        scale = np.linalg.norm(W, 2)
        Winv = np.linalg.pinv(W, rcond=1e-13) if scale > 0 else W
        gains[k] = PB.T @ Winv @ (P @ Phi)
        P = P @ Phi
    return gains


def min_energy_control(A, B, x, grid, K=DEFAULT_K, gains=True):
    """Minimum-energy deterministic steering of ``x`` to 0 at ``grid.T``.

    ``u~(t) = -B^T e^{-A^T (T - t)} G_T^{-1} e^{-A T} x`` with the
    reachability Gramian ``G_T = int_0^T e^{-A s} B B^T e^{-A^T s} ds``.
    ``y~`` is propagated exactly between grid points.
    """
    A = as_matrix(A, "A")
    n = A.shape[0]
    B = as_matrix(B, "B", rows=n)
    x = as_vector(x, "x", dim=n)
    _, rank = controllability_matrix_rank(A, B)
    if rank < n:
        raise RankDeficiencyError(f"Kalman rank condition fails: rank {rank} < {n}")
    Ksteps, dt = grid.steps, grid.dt
    E = matrix_exp(-A * dt)
    G_dt = controllability_gramian(A, B, dt, steps=8)
    # e^{-A^T (T - t_k)} for every k, built backwards from t_K = T
    back = np.empty((Ksteps + 1, n, n))
    back[Ksteps] = np.eye(n)
    for k in range(Ksteps - 1, -1, -1):
        back[k] = back[k + 1] @ E.T
    # G_T as the exact sum of per-step pieces keeps y~(T) = 0 to rounding
    G = np.einsum("kji,jl,klm->im", back[1:], G_dt, back[1:])
    G = 0.5 * (G + G.T)
    check_gramian(G)
    c = np.linalg.solve(G, back[0].T @ x)
    u = -np.einsum("ij,kjl,l->ki", B.T, back[:-1], c)
    y = np.empty((Ksteps + 1, n))
    y[0] = x
    for k in range(Ksteps):
        y[k + 1] = E @ y[k] - G_dt @ (back[k + 1] @ c)
    if np.linalg.norm(y[-1]) > TERMINAL_TOL * (1 + np.linalg.norm(x)):
        raise NumericalError(f"plan misses the origin by {np.linalg.norm(y[-1]):.3g}")
    g = _euler_gains(A, B, grid) if gains else np.empty((0, B.shape[1], n))
    return SteeringPlan(grid, u, G, y, int(K), A, B, g)


def _tail(b, a, K, lead_norm):
    """Bound on ``sum_{k>K} |b|^k/k! max(1,|a|)^{k-2} * lead_norm``."""
    ab = abs(b) * max(1.0, abs(a))
    r = ab / (K + 2)
    if r >= 1:
        raise TailBoundError(f"truncation K={K} too small for |b|={abs(b):.3g}, |a|={abs(a):.3g}")
    first = abs(b) ** (K + 1) / factorial(K + 1) * max(1.0, abs(a)) ** max(K - 1, 0) * lead_norm
    return first / (1 - r)


def adaptive_K(b, a, sigma_norm, K=DEFAULT_K, target=TAIL_TARGET, K_max=400):
    """Smallest truncation ``>= K`` whose tail bound is below ``target``."""
    k = int(K)
    while k <= K_max:
        ab = abs(b) * max(1.0, abs(a))
        if ab < k + 2 and _tail(b, a, k, sigma_norm * max(1.0, abs(a))) <= target:
            return k
        k += 5
    raise TailBoundError(f"no truncation up to K={K_max} meets the tail target for |b|={abs(b):.3g}")


def _D1_terms(b, sigma, K):
    n = sigma.shape[0]
    terms = []
    P = np.eye(n)
    for k in range(1, K + 1):
        terms.append(b**k / factorial(k) * P)
        P = P @ sigma
    return terms


def _f(b, a):
    """``(e^{ab} - 1 - ab)/a^2`` with its small-``ab`` series."""
    z = a * b
    if abs(z) < 1e-4:
        return b * b * (0.5 + z / 6 + z * z / 24)
    return (np.expm1(z) - z) / (a * a)


def _g(b, a):
    """``(e^{ab} - 1)/a`` so that ``exp(b sigma) = I + g sigma``."""
    z = a * b
    if abs(z) < 1e-8:
        return b * (1 + z / 2)
    return np.expm1(z) / a


def D1_closed(b, sigma, a):
    """``b I + f(b) sigma``, valid when ``sigma^2 = a sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    return b * np.eye(sigma.shape[0]) + _f(b, a) * sigma


def D_closed(b, sigma, A, a):
    """``D1(-b) A sigma D1(b)`` in closed form."""
    sigma = np.asarray(sigma, dtype=float)
    return D1_closed(-b, sigma, a) @ np.asarray(A, dtype=float) @ sigma @ D1_closed(b, sigma, a)


def _float_allowance(terms):
    return 64 * np.finfo(float).eps * sum(np.linalg.norm(t, 2) for t in terms)


def correction_series_D1(b_val, sigma, a, K=DEFAULT_K, check=True):
    """``sum_{k=1}^K b^k/k! sigma^{k-1}``.

    When ``sigma^2 = a sigma`` and ``check`` is set, the truncation is
    compared with :func:`D1_closed` and must agree within the tail bound.
    """
    if K < 2:
        raise InvalidInputError("K must be >= 2")
    sigma = as_matrix(sigma, "sigma")
    terms = _D1_terms(float(b_val), sigma, K)
    S = sum(terms)
    snorm = np.linalg.norm(sigma, 2)
    if check and np.linalg.norm(sigma @ sigma - a * sigma) <= POWER_TOL * (1 + snorm**2):
        bound = _tail(b_val, a, K, snorm) + _float_allowance(terms)
        err = np.linalg.norm(S - D1_closed(b_val, sigma, a), 2)
        if err > bound:
            raise TailBoundError(f"D1 truncation error {err:.3g} exceeds tail bound {bound:.3g}")
    return S


def correction_series_D(b_val, sigma, A, a, K=DEFAULT_K, check=True):
    """``(sum_k (-b)^k/k! sigma^{k-1}) A (sum_k b^k/k! sigma^k)``, both truncated at ``K``."""
    if K < 2:
        raise InvalidInputError("K must be >= 2")
    sigma = as_matrix(sigma, "sigma")
    A = as_matrix(A, "A", rows=sigma.shape[0], cols=sigma.shape[0])
    b = float(b_val)
    left_terms = _D1_terms(-b, sigma, K)
    right_terms = [t @ sigma for t in _D1_terms(b, sigma, K)]
    L, R = sum(left_terms), sum(right_terms)
    D = L @ A @ R
    snorm = np.linalg.norm(sigma, 2)
    if check and np.linalg.norm(sigma @ sigma - a * sigma) <= POWER_TOL * (1 + snorm**2):
        An = np.linalg.norm(A, 2)
        tL = _tail(b, a, K, snorm)
        tR = _tail(b, a, K, snorm * max(1.0, abs(a)))
        Lc = D1_closed(-b, sigma, a)
        Rc = sigma @ D1_closed(b, sigma, a)
        bound = tL * An * np.linalg.norm(Rc, 2) + np.linalg.norm(L, 2) * An * tR
        bound += np.linalg.norm(L, 2) * An * np.linalg.norm(R, 2) * 64 * np.finfo(float).eps
        bound += An * (_float_allowance(left_terms) * np.linalg.norm(R, 2) + np.linalg.norm(L, 2) * _float_allowance(right_terms))
        err = np.linalg.norm(D - Lc @ A @ Rc, 2)
        if err > bound:
            raise TailBoundError(f"D truncation error {err:.3g} exceeds tail bound {bound:.3g}")
    return D


def b_path(beta, times, a):
    """Exponent ``b(t) = beta(t) - a t / 2`` of ``Gamma(t) = exp(b(t) sigma)``."""
    return np.asarray(beta, dtype=float) - 0.5 * a * np.asarray(times, dtype=float)


def _pinv_solve(B_pinv, B, w):
    u = B_pinv @ w
    res = np.linalg.norm(w - B @ u)
    if res > RANGE_TOL * 1e2 * (1 + np.linalg.norm(w)):
        raise NumericalError(f"correction leaves range(B) (residual {res:.3g}); range(sigma) is not contained in range(B)")
    return u


def composite_control(plan, sigma, a, B_pinv, beta_path, K=DEFAULT_K, closed_form=True):
    """Open-loop composite control ``u_k = u~_k + B^+(sigma D y~_k + sigma D1 B u~_k)``.

    ``D1`` acts on the state space, so the nominal control enters through
    ``B u~``.

    ``beta_path`` holds ``beta(t_k)`` for ``k = 0..steps``; only ``beta_path[k]``
    enters ``u_k``, so the sequence is adapted. ``closed_form=False``
    evaluates the truncated series instead of the closed forms, raising
    the truncation above ``K`` wherever the tail bound exceeds 1e-10.
    """
    sigma = as_matrix(sigma, "sigma")
    beta = np.asarray(beta_path, dtype=float)
    if beta.shape[0] < plan.grid.steps:
        raise InvalidInputError("beta_path shorter than the plan")
    bs = b_path(beta[: plan.grid.steps], plan.grid.times[:-1], a)
    out = np.empty_like(plan.u_det)
    for k, b in enumerate(bs):
        if closed_form:
            D, D1 = D_closed(b, sigma, plan.A, a), D1_closed(b, sigma, a)
        else:
            k_b = adaptive_K(b, a, np.linalg.norm(sigma, 2), K)
            D = correction_series_D(b, sigma, plan.A, a, k_b)
            D1 = correction_series_D1(b, sigma, a, k_b)
        w = sigma @ D @ plan.y_det[k] + sigma @ D1 @ (plan.B @ plan.u_det[k])
        out[k] = plan.u_det[k] + _pinv_solve(B_pinv, plan.B, w)
    return out


class CompositeFeedback:
    """Adapted controller ``(t, X) -> u`` re-planned on the remaining horizon.

    ``coordinates="state"`` (default) applies ``u = -gains[k] X``: the
    minimum-energy plan from the current state for the noise-free drift,
    which is exact in ``X`` so only the matched noise ``sigma X dbeta`` is
    left to correct. ``coordinates="transformed"`` works on
    ``y = Gamma_k^{-1} X`` with ``Gamma_k = I + g(b_k) sigma``, nominal
    ``u~ = -gains[k] y`` and the correction
    ``u = u~ + B^+ g(b_k)(sigma B u~ + (A sigma - sigma A) y)``; the part of
    the commutator outside ``range(B)`` is then left uncorrected.
    """

    def __init__(self, plan, sigma, a, beta_path, coordinates="state"):
        if coordinates not in ("state", "transformed"):
            raise InvalidInputError(f"unknown coordinates {coordinates!r}")
        self.plan = plan
        self.sigma = as_matrix(sigma, "sigma")
        self.a = float(a)
        self.beta = np.asarray(beta_path, dtype=float)
        self.coordinates = coordinates
        self.B_pinv = np.linalg.pinv(plan.B)
        self.comm = plan.A @ self.sigma - self.sigma @ plan.A

    def step_index(self, t):
        return min(int(round(t / self.plan.grid.dt)), self.plan.grid.steps - 1)

    def __call__(self, t, X):
        k = self.step_index(t)
        return self.batch(k, np.asarray(X, dtype=float)[None], self.beta[k][None])[0]

    def batch(self, k, X, beta_k):
        """Controls for states ``X`` (P, n) with per-path ``beta(t_k)`` (P,)."""
        if self.coordinates == "state":
            return -X @ self.plan.gains[k].T
        b = beta_k - 0.5 * self.a * k * self.plan.grid.dt
        g = np.array([_g(bi, self.a) for bi in b])
        # (I + g sigma)^{-1} = I - g/(1 + a g) sigma
        h = g / (1 + self.a * g)
        Y = X - h[:, None] * (X @ self.sigma.T)
        u_nom = -Y @ self.plan.gains[k].T
        w = g[:, None] * (u_nom @ (self.sigma @ self.plan.B).T + Y @ self.comm.T)
        return u_nom + w @ self.B_pinv.T


def composite_feedback(plan, sigma, a, beta_path, coordinates="state"):
    """:class:`CompositeFeedback` for one Brownian path (``beta(t_k)`` values)."""
    return CompositeFeedback(plan, sigma, a, beta_path, coordinates)


def simulate_composite_batch(plan, sigma, a, x, dW, coordinates="state"):
    """Euler-Maruyama for ``dX + A X dt = sigma X dbeta + B u dt`` under
    :class:`CompositeFeedback`, vectorized over paths.

    ``dW`` has shape (P, steps) or (P, steps, 1). Returns ``X`` of shape
    (P, steps+1, n).
    """
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == 3:
        dW = dW[..., 0]
    P, K = dW.shape
    if K != plan.grid.steps:
        raise InvalidInputError("increments do not match the plan grid")
    ctl = CompositeFeedback(plan, sigma, a, np.zeros(K + 1), coordinates)
    beta = np.concatenate([np.zeros((P, 1)), np.cumsum(dW, axis=1)], axis=1)
    A, B, S, dt = plan.A, plan.B, ctl.sigma, plan.grid.dt
    n = A.shape[0]
    X = np.empty((P, K + 1, n))
    X[:, 0] = as_vector(x, "x", dim=n)
    for k in range(K):
        Xk = X[:, k]
        u = ctl.batch(k, Xk, beta[:, k])
        X[:, k + 1] = Xk + dt * (u @ B.T - Xk @ A.T) + (Xk @ S.T) * dW[:, k : k + 1]
    return X


def companion_system(a_coeffs, b_coeffs):
    """Matrices ``(A, B, sigma)`` of the first-order form of
    ``X^(n) + sum_i a_i X^(i-1) = (sum_i b_i X^(i-1)) W' + u``:
    ones on the superdiagonal of ``A`` with last row ``a``, ``B = e_n`` and
    ``sigma`` zero except for its last row ``b``.
    """
    a = np.atleast_1d(np.asarray(a_coeffs, dtype=float))
    b = np.atleast_1d(np.asarray(b_coeffs, dtype=float))
    if a.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise InvalidInputError("a_coeffs and b_coeffs must be equal-length 1-D sequences")
    n = a.size
    A = np.eye(n, k=1)
    A[-1] = a
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    sigma = np.zeros((n, n))
    sigma[-1] = b
    return A, B, sigma
