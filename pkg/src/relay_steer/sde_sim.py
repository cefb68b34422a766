"""Brownian paths and Euler-Maruyama integration of the controlled SDE

    dX + A(t) X dt = sigma(X) dW + B(t) u dt

in open loop (user controller) and in closed loop with the regularized
relay law, including hitting-time detection and post-hit holding.
"""

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core_math import SignRegularization
from .exceptions import DivergenceError, InvalidInputError, ShapeError
from .relay_control import hold_control, regularization_band

DEFAULT_STEPS = 10_000
DIVERGENCE_GUARD = 1e12
UINT64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInputError(f"T must be positive, got {self.T}")
        if int(self.steps) < 1:
            raise InvalidInputError("steps must be >= 1")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def from_dt(cls, T, dt):
        return cls(T, max(1, int(round(T / dt))))

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t):
        """Grid index of the first grid time >= ``t`` (clipped to the grid)."""
        return int(min(self.steps, max(0, np.ceil(t / self.dt - 1e-9))))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    grid: TimeGrid
    d: int
    increments: np.ndarray
    seed: Optional[int] = None
    stream: Optional[int] = None

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.grid.steps, self.d):
            raise ShapeError(f"increments must have shape {(self.grid.steps, self.d)}, got {inc.shape}")
        object.__setattr__(self, "increments", inc)

    @property
    def values(self):
        """``W(t_k)``, shape ``(steps + 1, d)``."""
        return np.vstack([np.zeros((1, self.d)), np.cumsum(self.increments, axis=0)])

    def coarsen(self, factor):
        """Path on a grid ``factor`` times coarser, summing increments."""
        factor = int(factor)
        if self.grid.steps % factor:
            raise InvalidInputError("coarsening factor must divide the number of steps")
        inc = self.increments.reshape(self.grid.steps // factor, factor, self.d).sum(axis=1)
        return BrownianPath(TimeGrid(self.grid.T, self.grid.steps // factor), self.d, inc, self.seed, self.stream)


def stream_generator(seed, stream):
    """Counter-based generator keyed by ``(seed, stream)``."""
    ss = np.random.SeedSequence(int(seed) & UINT64, spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def sample_brownian(grid, d, seed, stream=0):
    """Wiener increments ``N(0, dt)`` reproducible from ``(seed, stream)``."""
    if int(d) < 1:
        raise InvalidInputError("d must be >= 1")
    rng = stream_generator(seed, stream)
    inc = rng.standard_normal((grid.steps, int(d))) * np.sqrt(grid.dt)
    return BrownianPath(grid, int(d), inc, seed, stream)


def sample_increments(grid, d, seed, streams):
    """Stacked increments for several streams, shape ``(P, steps, d)``."""
    return np.stack([sample_brownian(grid, d, seed, s).increments for s in streams])


@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    hit: bool
    tau_hat: Optional[float]
    held: bool
    hold_infeasible: bool = False
    hit_tol: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def with_diagnostic(self, name, series):
        return replace(self, diagnostics={**self.diagnostics, name: np.asarray(series)})


def default_hit_tol(scenario):
    if scenario.solver.hit_tol is not None:
        return float(scenario.solver.hit_tol)
    return 1e-4 * (1.0 + float(np.linalg.norm(scenario.x - scenario.y)))


def default_grid(scenario):
    if scenario.solver.dt is not None:
        return TimeGrid.from_dt(scenario.T, scenario.solver.dt)
    return TimeGrid(scenario.T, DEFAULT_STEPS)


def default_regularization(scenario, grid=None):
    """Smoothed sign with ``eps = rho * dt`` unless the scenario fixes epsilon.

    With this width the regularized relay never overshoots the target in a
    single explicit step for well-conditioned ``B``.
    """
    if scenario.solver.epsilon is not None:
        return SignRegularization.smoothed(scenario.solver.epsilon)
    grid = grid or default_grid(scenario)
    eps = scenario.rho * grid.dt
    return SignRegularization.smoothed(eps if eps > 0 else 1.0)


def _sign(v, eps):
    return v / np.maximum(np.sqrt(np.einsum("pi,pi->p", v, v))[:, None], eps)


@dataclass
class BatchResult:
    """Raw output of :func:`simulate_batch` (per-path arrays have leading P)."""

    hit_idx: np.ndarray
    held: np.ndarray
    hold_infeasible: np.ndarray
    diverged: np.ndarray
    dist: np.ndarray
    terminal: np.ndarray
    states: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None


def simulate_batch(scenario, grid, dW, reg, hit_tol, hold=True, record=False,
                   guard=DIVERGENCE_GUARD, hit_until=None):
    """Closed-loop Euler-Maruyama for ``P`` paths at once.

    ``dW`` has shape ``(P, steps, d)``. Hits are only registered at grid
    times ``<= hit_until`` (default: the whole grid). Diverging paths are
    frozen and flagged rather than raising.
    """
    P = dW.shape[0]
    n, m = scenario.n, scenario.m
    K, dt = grid.steps, grid.dt
    y = scenario.y
    rho = scenario.rho
    sigma = scenario.sigma
    hit_last = K if hit_until is None else min(K, int(np.floor(hit_until / dt + 1e-9)))
    const_coeffs = scenario.A.is_constant and scenario.B.is_constant

    X = np.tile(scenario.x, (P, 1))
    hit_idx = np.full(P, -1)
    held = np.zeros(P, dtype=bool)
    infeasible = np.zeros(P, dtype=bool)
    diverged = np.zeros(P, dtype=bool)
    dist = np.zeros((P, K + 1))
    states = np.empty((P, K + 1, n)) if record else None
    controls = np.zeros((P, K, m)) if record else None
    u_hold_cache = {}

    def u_hold_at(t):
        key = 0.0 if const_coeffs else t
        if key not in u_hold_cache:
            u_hold_cache[key] = hold_control(t, scenario)
        return u_hold_cache[key]

    for k in range(K + 1):
        t = k * dt
        dk = np.sqrt(np.einsum("pi,pi->p", X - y, X - y))
        dist[:, k] = dk
        if record:
            states[:, k] = X
        if k <= hit_last:
            new = (hit_idx < 0) & ~diverged & (dk <= hit_tol)
            if new.any():
                hit_idx[new] = k
                if hold:
                    if u_hold_at(t) is None:
                        infeasible[new] = True
                    else:
                        held[new] = True
        if k == K:
            break
        if hold and held.any() and not const_coeffs and u_hold_at(t) is None:
            infeasible[held] = True
            held[:] = False
        if const_coeffs and (held | diverged).all():
            # every path sits at y with zero drift and zero noise
            if record:
                states[:, k + 1:] = np.where(diverged[:, None], X, y)[:, None, :]
                controls[:, k:] = np.where(held[:, None], u_hold_at(t), 0.0)[:, None, :]
            dist[:, k + 1:] = np.where(diverged, dk, 0.0)[:, None]
            break
        A = scenario.A(t)
        B = scenario.B(t)
        band = regularization_band(reg, scenario, t)
        u = -rho * _sign((X - y) @ B, band)
        if held.any():
            u[held] = u_hold_at(t)
        Xn = X + dt * (u @ B.T - X @ A.T) + sigma.noise(X, dW[:, k])
        if held.any():
            Xn[held] = y
        if diverged.any():
            Xn[diverged] = X[diverged]
        bad = ~np.isfinite(Xn).all(axis=1) | (np.abs(Xn).max(axis=1) > guard)
        if bad.any():
            diverged |= bad
            Xn[bad] = X[bad]
        if record:
            controls[:, k] = u
        X = Xn
    return BatchResult(hit_idx, held, infeasible, diverged, dist, X, states, controls)


def _result_from_batch(res, i, grid, hit_tol, name="distance"):
    hit = bool(res.hit_idx[i] >= 0)
    return TrajectoryResult(
        times=grid.times,
        states=res.states[i],
        controls=res.controls[i],
        hit=hit,
        tau_hat=float(res.hit_idx[i] * grid.dt) if hit else None,
        held=bool(res.held[i]),
        hold_infeasible=bool(res.hold_infeasible[i]),
        hit_tol=hit_tol,
        diagnostics={name: res.dist[i]},
    )


def _check_path(scenario, path):
    if path.d != scenario.d:
        raise ShapeError(f"path has d={path.d} but the scenario needs d={scenario.d}")
    if not np.isclose(path.grid.T, scenario.T):
        raise ShapeError("path horizon does not match the scenario horizon")


def integrate_closed_loop(scenario, path, reg=None, hit_tol=None, hold=True):
    """Integrate the regularized relay system on one Brownian path.

    Raises :class:`DivergenceError` when the state norm passes the guard.
    """
    _check_path(scenario, path)
    reg = reg or default_regularization(scenario, path.grid)
    hit_tol = default_hit_tol(scenario) if hit_tol is None else hit_tol
    if not hit_tol > 0:
        raise InvalidInputError("hit_tol must be positive")
    res = simulate_batch(scenario, path.grid, path.increments[None], reg, hit_tol, hold=hold, record=True)
    if res.diverged[0]:
        raise DivergenceError(f"state norm exceeded {DIVERGENCE_GUARD:g}; reduce dt")
    return _result_from_batch(res, 0, path.grid, hit_tol)


def integrate_closed_loop_batch(scenario, paths, reg=None, hit_tol=None, hold=True):
    """Vectorized :func:`integrate_closed_loop` over paths sharing one grid."""
    grid = paths[0].grid
    for p in paths:
        _check_path(scenario, p)
        if p.grid != grid:
            raise ShapeError("all paths must share a grid")
    reg = reg or default_regularization(scenario, grid)
    hit_tol = default_hit_tol(scenario) if hit_tol is None else hit_tol
    dW = np.stack([p.increments for p in paths])
    res = simulate_batch(scenario, grid, dW, reg, hit_tol, hold=hold, record=True)
    if res.diverged.any():
        raise DivergenceError(f"state norm exceeded {DIVERGENCE_GUARD:g}; reduce dt")
    return [_result_from_batch(res, i, grid, hit_tol) for i in range(len(paths))]


def integrate_open_loop(scenario, controller, path, hit_tol=None):
    """Euler-Maruyama with ``u_k = controller(t_k, X_k)``; no holding."""
    _check_path(scenario, path)
    hit_tol = default_hit_tol(scenario) if hit_tol is None else hit_tol
    grid = path.grid
    K, dt, y = grid.steps, grid.dt, scenario.y
    X = scenario.x[None, :].copy()
    states = np.empty((K + 1, scenario.n))
    controls = np.empty((K, scenario.m))
    dist = np.empty(K + 1)
    hit_k = -1
    for k in range(K + 1):
        t = k * dt
        states[k] = X[0]
        dist[k] = np.sqrt(np.einsum("pi,pi->p", X - y, X - y))[0]
        if hit_k < 0 and dist[k] <= hit_tol:
            hit_k = k
        if k == K:
            break
        u = np.asarray(controller(t, X[0].copy()), dtype=float).reshape(1, scenario.m)
        A = scenario.A(t)
        B = scenario.B(t)
        X = X + dt * (u @ B.T - X @ A.T) + scenario.sigma.noise(X, path.increments[k][None])
        if not np.isfinite(X).all() or np.abs(X).max() > DIVERGENCE_GUARD:
            raise DivergenceError(f"state norm exceeded {DIVERGENCE_GUARD:g} at t={t + dt:.6g}; reduce dt")
        controls[k] = u[0]
    return TrajectoryResult(
        times=grid.times,
        states=states,
        controls=controls,
        hit=hit_k >= 0,
        tau_hat=hit_k * dt if hit_k >= 0 else None,
        held=False,
        hit_tol=hit_tol,
        diagnostics={"distance": dist},
    )


def supermartingale_series(traj, y, C_star):
    """``exp(-C* t_k) |X_k - y|`` along a trajectory."""
    if not C_star > 0:
        raise InvalidInputError("C_star must be positive")
    d = np.linalg.norm(traj.states - np.asarray(y, dtype=float), axis=1)
    return np.exp(-C_star * traj.times) * d


@dataclass(frozen=True)
class ConvergenceTable:
    eps: tuple
    distances: np.ndarray

    def rows(self):
        k = len(self.eps)
        return [(self.eps[i], self.eps[j], float(self.distances[i, j])) for i in range(k) for j in range(i + 1, k)]

    def consecutive(self):
        """Distances between neighbouring entries of the epsilon list."""
        return np.array([self.distances[i, i + 1] for i in range(len(self.eps) - 1)])

    def is_cauchy(self):
        c = self.consecutive()
        return bool(np.all(np.diff(c) < 0))


def regularization_convergence(scenario, path, eps_list, hit_tol=None, hold=False):
    """Sup-norm distances between trajectories regularized at each epsilon.

    Holding is off by default so the comparison is between the regularized
    flows themselves.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2:
        raise InvalidInputError("need at least two epsilon values")
    if any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidInputError("eps_list must be decreasing")
    trajs = [
        integrate_closed_loop(scenario, path, SignRegularization.smoothed(e), hit_tol=hit_tol, hold=hold)
        for e in eps_list
    ]
    k = len(eps_list)
    D = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            D[i, j] = D[j, i] = np.max(np.linalg.norm(trajs[i].states - trajs[j].states, axis=1))
    return ConvergenceTable(tuple(eps_list), D)


def dump_trajectory_csv(traj, path):
    """Write ``t, X_1..X_n, u_1..u_m, hit_flag`` rows (controls empty on the last row)."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    header = ["t"] + [f"X_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)] + ["hit_flag"]
    tau = traj.tau_hat
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(traj.times):
            u = [repr(float(v)) for v in traj.controls[k]] if k < len(traj.controls) else [""] * m
            flag = int(tau is not None and t >= tau - 1e-12)
            w.writerow([repr(float(t))] + [repr(float(v)) for v in traj.states[k]] + u + [flag])


def read_trajectory_csv(path):
    """Inverse of :func:`dump_trajectory_csv` returning ``(header, rows)``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r]
    return header, rows
