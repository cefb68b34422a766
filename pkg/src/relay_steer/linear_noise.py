"""Linear multiplicative noise: the fundamental solution ``Gamma`` of
``dGamma = sum_i sigma_i Gamma dbeta_i``, the random ODE obtained from the
substitution ``X = Gamma y``, and pathwise relay steering of that ODE.

Two conventions are available for the steering gain:

* ``rule="literal"``: ``1/C1 = sup ||Gamma^{-T}||`` and
  ``rho = (C2 |y_T| + |x - y_T|) / (gamma C1)``.
* ``rule="sufficient"``: ``1/C1 = sup ||Gamma||`` (the constant for which
  ``|(Gamma^{-1} B)^T v| >= gamma C1 |v|`` holds) and the smallest gain
  satisfying the finite-time reaching inequality
  ``(rho gamma C1 - C2 |y_T|)(1 - e^{-C2 T}) / C2 >= |x - y_T|``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core_math import as_matrix, as_vector, gamma_lower_bound, matrix_exp
from .exceptions import InvalidInputError, NumericalError, ShapeError
from .relay_control import BoundConstants, failure_probability_bound
from .scenario import MatrixFunction

GAMMA_COND_MAX = 1e12
COMMUTE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FundamentalSolutionPath:
    grid: object
    gammas: np.ndarray
    inverses: np.ndarray
    method: str

    @property
    def terminal(self):
        return self.gammas[-1]

    @property
    def terminal_inverse(self):
        return self.inverses[-1]


def _commute(mats):
    for i, S in enumerate(mats):
        for R in mats[i + 1:]:
            if np.linalg.norm(S @ R - R @ S) > COMMUTE_TOL * (1 + np.linalg.norm(S) * np.linalg.norm(R)):
                return False
    return True


def _check_sigmas(sigmas, d=None):
    mats = [as_matrix(S, f"sigma[{i}]") for i, S in enumerate(sigmas)]
    n = mats[0].shape[0]
    if any(S.shape != (n, n) for S in mats):
        raise ShapeError("all sigma_i must be n x n")
    if d is not None and len(mats) != d:
        raise ShapeError(f"{len(mats)} noise matrices but the path has d={d}")
    return mats


def fundamental_solution(sigmas, path, method="auto"):
    """``Gamma(t_k)`` and its inverse along a Brownian path.

    ``method="auto"`` uses the exact exponential
    ``exp(sum_i sigma_i beta_i(t) - t/2 sum_i sigma_i^2)`` when the
    ``sigma_i`` commute and Euler-Maruyama otherwise.
    """
    mats = _check_sigmas(sigmas, path.d)
    n = mats[0].shape[0]
    if method == "auto":
        method = "closed_form_commuting" if _commute(mats) else "euler_sde"
    if method == "closed_form_commuting":
        if not _commute(mats):
            raise InvalidInputError("closed form needs pairwise commuting sigma_i")
        W = path.values
        t = path.grid.times
        S = np.stack(mats)
        S2 = sum(M @ M for M in mats)
        expo = np.einsum("kd,dij->kij", W, S) - 0.5 * t[:, None, None] * S2
        gammas = matrix_exp(expo)
        inverses = matrix_exp(-expo)
    elif method == "euler_sde":
        K = path.grid.steps
        gammas = np.empty((K + 1, n, n))
        gammas[0] = np.eye(n)
        G = gammas[0]
        for k in range(K):
            dG = sum(mats[i] @ G * path.increments[k, i] for i in range(len(mats)))
            G = G + dG
            gammas[k + 1] = G
        cond = np.linalg.cond(gammas)
        if not np.all(np.isfinite(cond)) or cond.max() > GAMMA_COND_MAX:
            raise NumericalError(f"Gamma became near-singular (condition {np.nanmax(cond):.3g}); reduce dt")
        inverses = np.linalg.inv(gammas)
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return FundamentalSolutionPath(path.grid, gammas, inverses, method)


def transformed_drift(t, Gamma, Gamma_inv, A, B):
    """``(Gamma^{-1} A(t) Gamma, Gamma^{-1} B(t))``; broadcasts over stacked Gammas."""
    A = MatrixFunction.coerce(A, "A")(t)
    B = MatrixFunction.coerce(B, "B")(t)
    return Gamma_inv @ A @ Gamma, Gamma_inv @ B


@dataclass(frozen=True)
class SteeringConstants:
    C1_star_inv: float
    C2_star: float
    rho_tilde: float
    gamma: float
    T: float
    rule: str = "literal"

    @property
    def C1_star(self):
        return 1.0 / self.C1_star_inv

    def reach_margin(self, x, y_T, rho=None):
        """Left minus right side of the finite-time reaching inequality."""
        rho = self.rho_tilde if rho is None else rho
        ynorm = float(np.linalg.norm(y_T))
        dist = float(np.linalg.norm(np.asarray(x) - np.asarray(y_T)))
        C2, T = self.C2_star, self.T
        horizon = T if C2 * T < 1e-12 else -np.expm1(-C2 * T) / C2
        return (rho * self.gamma * self.C1_star - C2 * ynorm) * horizon - dist


def _A_stack(A, times):
    A = MatrixFunction.coerce(A, "A")
    if A.is_constant:
        return A(0.0)[None]
    return np.stack([A(t) for t in times])


def _sup_norm(stack):
    return float(np.linalg.norm(stack, ord=2, axis=(-2, -1)).max())


def steering_constants(fs, A, gamma, x, y_T, rule="literal"):
    """Path-dependent constants and steering gain on the simulation grid."""
    x = as_vector(x, "x")
    y_T = as_vector(y_T, "y_T")
    A_t = _A_stack(A, fs.grid.times)
    C2 = _sup_norm(fs.inverses @ A_t @ fs.gammas)
    dist = float(np.linalg.norm(x - y_T))
    ynorm = float(np.linalg.norm(y_T))
    T = fs.grid.T
    if rule == "literal":
        c1_inv = _sup_norm(np.swapaxes(fs.inverses, -1, -2))
        rho = c1_inv / gamma * (C2 * ynorm + dist)
    elif rule == "sufficient":
        c1_inv = _sup_norm(fs.gammas)
        horizon = T if C2 * T < 1e-12 else -np.expm1(-C2 * T) / C2
        rho = c1_inv / gamma * (C2 * ynorm + dist / horizon)
    else:
        raise InvalidInputError(f"unknown rule {rule!r}")
    return SteeringConstants(c1_inv, C2, float(rho), float(gamma), float(T), rule)


@dataclass(frozen=True, eq=False)
class SteeringResult:
    y_path: np.ndarray
    X_path: np.ndarray
    success: bool
    y_T: np.ndarray
    constants: SteeringConstants
    rho_used: float
    eps: float
    sufficiency_ok: bool
    notes: tuple = field(default_factory=tuple)

    @property
    def terminal_error(self):
        return float(np.linalg.norm(self.y_path[-1] - self.y_T))


def _sign(v, eps):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def _band(eps, rho, Bt, dt):
    """Per-path smoothing width; NaN entries mean ``rho dt ||Bt||^2`` at this step."""
    auto = rho * dt * np.linalg.norm(Bt, ord=2, axis=(-2, -1)) ** 2
    return np.where(np.isnan(eps), np.maximum(auto, 1e-300), eps)


def integrate_transformed(Gam, Ginv, A_t, B, x, y_T, rho, eps, dt):
    """Explicit Euler for ``dy/dt = -Gamma^{-1} A Gamma y + Gamma^{-1} B u``
    with ``u = -rho sign_eps((Gamma^{-1} B)^T (y - y_T))``.

    Arrays carry a leading path axis: ``Gam, Ginv`` are ``(P, K+1, n, n)``,
    ``y_T`` is ``(P, n)``, ``rho`` and ``eps`` are ``(P,)`` (NaN in ``eps``
    selects the per-step width ``rho dt ||Gamma^{-1} B||^2``). Returns ``y``
    of shape ``(P, K+1, n)``.
    """
    P, K1, n, _ = Gam.shape
    y = np.empty((P, K1, n))
    y[:, 0] = x
    for k in range(K1 - 1):
        Ak = A_t[min(k, A_t.shape[0] - 1)]
        At = Ginv[:, k] @ Ak @ Gam[:, k]
        Bt = Ginv[:, k] @ B
        v = y[:, k] - y_T
        band = _band(eps, rho, Bt, dt)
        u = -rho[:, None] * _sign(np.einsum("pnm,pn->pm", Bt, v), band[:, None])
        y[:, k + 1] = y[:, k] + dt * (np.einsum("pnm,pm->pn", Bt, u) - np.einsum("pij,pj->pi", At, y[:, k]))
    return y


def simulate_direct_feedback(Gam, Ginv, A_t, B, sigmas, x, y_T, rho, eps, dW, dt):
    """Euler-Maruyama for ``dX + A X dt = sum_i sigma_i X dbeta_i + B u dt``
    with the feedback ``u = -rho sign((Gamma^{-1}B)^T Gamma^{-1}(X - Gamma y_T))``.

    Shapes as in :func:`integrate_transformed`; ``dW`` is ``(P, K, d)``.
    """
    P, K1, n, _ = Gam.shape
    S = np.stack(sigmas)
    X = np.empty((P, K1, n))
    X[:, 0] = x
    for k in range(K1 - 1):
        Ak = A_t[min(k, A_t.shape[0] - 1)]
        Bt = Ginv[:, k] @ B
        Xk = X[:, k]
        target = np.einsum("pij,pj->pi", Gam[:, k], y_T)
        v = np.einsum("pij,pj->pi", Ginv[:, k], Xk - target)
        band = _band(eps, rho, Bt, dt)
        u = -rho[:, None] * _sign(np.einsum("pnm,pn->pm", Bt, v), band[:, None])
        noise = np.einsum("dij,pj,pd->pi", S, Xk, dW[:, k])
        X[:, k + 1] = Xk + dt * (u @ B.T - Xk @ Ak.T) + noise
    return X


def resolve_terminal(X_T, fs, path):
    """Target ``X_T`` from a vector, a callable of the path, or ``{"gamma_terminal_of": v}``."""
    if callable(X_T):
        return as_vector(X_T(path), "X_T")
    if isinstance(X_T, dict):
        if "X_T" in X_T:
            return as_vector(X_T["X_T"], "X_T")
        if "gamma_terminal_of" in X_T:
            return fs.terminal @ as_vector(X_T["gamma_terminal_of"])
        raise InvalidInputError("target dict needs 'X_T' or 'gamma_terminal_of'")
    return as_vector(X_T, "X_T")


def _prepare(A, B, sigmas, x, X_T, path, rule, eps, fs):
    B_fn = MatrixFunction.coerce(B, "B")
    if not B_fn.is_constant:
        raise InvalidInputError("pathwise steering needs a constant B")
    B = B_fn(0.0)
    sig = _check_sigmas(sigmas, path.d)
    x = as_vector(x, "x", dim=sig[0].shape[0])
    fs = fs or fundamental_solution(sig, path)
    y_T = fs.terminal_inverse @ resolve_terminal(X_T, fs, path)
    gamma = gamma_lower_bound(B)
    if gamma <= 0:
        raise InvalidInputError("gamma_lower_bound(B) = 0")
    consts = steering_constants(fs, A, gamma, x, y_T, rule=rule)
    notes = []
    rho = consts.rho_tilde
    margin = consts.reach_margin(x, y_T)
    dist = float(np.linalg.norm(x - y_T))
    ok = margin >= 0
    if not ok and -margin <= 0.01 * max(dist, 1e-300):
        rho *= 1.1
        notes.append("gain inflated by 10% after a marginal reaching-inequality failure")
        ok = consts.reach_margin(x, y_T, rho) >= 0
    if not ok:
        notes.append(f"reaching inequality fails by {-margin:.3g}; running anyway")
    A_t = _A_stack(A, path.grid.times)
    eps_val = float(eps) if eps is not None else np.nan
    return B, sig, x, fs, y_T, consts, rho, ok, notes, A_t, eps_val


def pathwise_steer(A, B, sigmas, x, X_T, path, grid=None, rule="sufficient", eps=None, tol=None, fs=None):
    """Steer ``x`` to ``X_T`` along one Brownian path via the random ODE.

    ``eps`` is the sign smoothing width; by default it follows
    ``rho * dt * ||Gamma^{-1}(t) B||^2`` step by step (``eps`` is then NaN
    in the result). Success means
    ``|y(T) - y_T| <= tol`` with ``tol = 1e-3 (1 + |y_T|)`` by default.
    """
    if grid is not None and (grid.steps != path.grid.steps or abs(grid.T - path.grid.T) > 1e-12):
        raise ShapeError("grid does not match the Brownian path")
    B, sig, x, fs, y_T, consts, rho, ok, notes, A_t, eps_val = _prepare(A, B, sigmas, x, X_T, path, rule, eps, fs)
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    y = integrate_transformed(fs.gammas[None], fs.inverses[None], A_t, B, x, y_T[None],
                              np.array([rho]), np.array([eps_val]), path.grid.dt)[0]
    X = np.einsum("kij,kj->ki", fs.gammas, y)
    tol = 1e-3 * (1 + np.linalg.norm(y_T)) if tol is None else tol
    success = bool(np.linalg.norm(y[-1] - y_T) <= tol)
    return SteeringResult(y, X, success, y_T, consts, rho, eps_val, ok, tuple(notes))


def pathwise_steer_batch(A, B, sigmas, x, X_T, paths, rule="sufficient", eps=None, tol=None):
    """:func:`pathwise_steer` over many paths at once (no warnings emitted)."""
    preps = [_prepare(A, B, sigmas, x, X_T, p, rule, eps, None) for p in paths]
    B_, sig, x_, _, _, _, _, _, _, A_t, _ = preps[0]
    Gam = np.stack([p[3].gammas for p in preps])
    Ginv = np.stack([p[3].inverses for p in preps])
    y_T = np.stack([p[4] for p in preps])
    rho = np.array([p[6] for p in preps])
    epss = np.array([p[10] for p in preps])
    y = integrate_transformed(Gam, Ginv, A_t, B_, x_, y_T, rho, epss, paths[0].grid.dt)
    X = np.einsum("pkij,pkj->pki", Gam, y)
    out = []
    for i, p in enumerate(preps):
        tol_i = 1e-3 * (1 + np.linalg.norm(p[4])) if tol is None else tol
        success = bool(np.linalg.norm(y[i, -1] - p[4]) <= tol_i)
        out.append(SteeringResult(y[i], X[i], success, p[4], p[5], p[6], p[10], p[7], tuple(p[8])))
    return out


def transformation_discrepancy(A, B, sigmas, x, X_T, paths, rule="sufficient", eps=None):
    """``sup_k |X_k - Gamma_k y_k|`` per path: direct SDE with the mapped-back
    feedback versus ``Gamma`` times the random-ODE solution, on shared noise."""
    preps = [_prepare(A, B, sigmas, x, X_T, p, rule, eps, None) for p in paths]
    B_, sig, x_, _, _, _, _, _, _, A_t, _ = preps[0]
    Gam = np.stack([p[3].gammas for p in preps])
    Ginv = np.stack([p[3].inverses for p in preps])
    y_T = np.stack([p[4] for p in preps])
    rho = np.array([p[6] for p in preps])
    epss = np.array([p[10] for p in preps])
    dt = paths[0].grid.dt
    dW = np.stack([p.increments for p in paths])
    y = integrate_transformed(Gam, Ginv, A_t, B_, x_, y_T, rho, epss, dt)
    X = simulate_direct_feedback(Gam, Ginv, A_t, B_, sig, x_, y_T, rho, epss, dW, dt)
    GY = np.einsum("pkij,pkj->pki", Gam, y)
    return np.linalg.norm(X - GY, axis=-1).max(axis=1)


def adapted_variant_bound(constants, rho, x, y_T):
    """Upper bound on ``P(tau > T)`` for the transformed system driven by a
    deterministic gain ``rho`` towards a deterministic ``y_T``.

    ``constants`` is a sequence of per-path :class:`SteeringConstants`,
    aggregated conservatively (largest ``C2``, smallest ``C1``).
    """
    constants = list(constants)
    if not constants:
        raise InvalidInputError("need at least one set of constants")
    C2 = max(c.C2_star for c in constants)
    C1 = min(c.C1_star for c in constants)
    gamma = min(c.gamma for c in constants)
    T = constants[0].T
    consts = BoundConstants(max(C2, 1e-8), gamma * C1)
    return float(min(1.0, max(0.0, failure_probability_bound(consts, x, y_T, T, rho))))
