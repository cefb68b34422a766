"""Problem instances: time-dependent coefficients, diffusion specs, scenarios.

Scenario files are TOML (or JSON, chosen by extension) with the keys::

    n, m, d          dimensions
    A, B             nested arrays, or {times = [...], values = [[[...]], ...]}
                     breakpoint tables interpolated linearly in t
    [sigma]          kind = "linear" | "affine_zero", matrices = [...],
                     y_zero = [...] (affine_zero only)
    x, y             initial state and target
    T                horizon
    rho              gain, or {confidence = p} to invert the success bound
    [solver]         dt, epsilon ("auto" or a number), hit_tol
    [ensemble]       paths, seed
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core_math import as_matrix, as_vector, gamma_lower_bound
from .exceptions import HypothesisError, InvalidInputError, ShapeError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SIGMA_ZERO_TOL = 1e-12
DEFAULT_T_SAMPLES = 1001


class MatrixFunction:
    """Matrix-valued function of time: constant or a breakpoint table.

    Tables are interpolated linearly and held constant outside their range.
    """

    def __init__(self, values, times=None, name="matrix"):
        if times is None:
            self._const = as_matrix(values, name)
            self.times = None
            self.values = self._const[None]
        else:
            times = as_vector(times, f"{name}.times")
            if times.size < 2 or np.any(np.diff(times) <= 0):
                raise InvalidInputError(f"{name}.times must be strictly increasing with >= 2 entries")
            vals = np.asarray(values, dtype=float)
            if vals.ndim == 2 and vals.shape[0] == times.size:
                vals = vals[:, :, None]
            if vals.ndim != 3 or vals.shape[0] != times.size:
                raise ShapeError(f"{name}.values must have one matrix per breakpoint")
            if not np.all(np.isfinite(vals)):
                raise InvalidInputError(f"{name} has non-finite entries")
            self._const = None
            self.times = times
            self.values = vals
        self.name = name

    @classmethod
    def coerce(cls, obj, name="matrix"):
        if isinstance(obj, cls):
            return obj
        if isinstance(obj, dict):
            return cls(obj["values"], obj["times"], name=name)
        return cls(obj, name=name)

    @property
    def shape(self):
        return self.values.shape[1:]

    @property
    def is_constant(self):
        return self._const is not None

    def __call__(self, t):
        if self._const is not None:
            return self._const
        ts = self.times
        if t <= ts[0]:
            return self.values[0]
        if t >= ts[-1]:
            return self.values[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]

    def to_dict(self):
        if self._const is not None:
            return self._const.tolist()
        return {"times": self.times.tolist(), "values": self.values.tolist()}

    def __eq__(self, other):
        if not isinstance(other, MatrixFunction):
            return NotImplemented
        same_times = (self.times is None and other.times is None) or (
            self.times is not None and other.times is not None and np.array_equal(self.times, other.times)
        )
        return same_times and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """State-dependent diffusion ``sigma(X)``, an ``n x d`` matrix.

    Kinds:

    * ``linear``: column j is ``S_j @ X``.
    * ``affine_zero``: column j is ``S_j @ (X - y_zero)``.
    * ``custom``: ``func(X) -> (n, d)`` with a declared Lipschitz constant
      and a declared zero ``y_zero``.
    """

    kind: str
    matrices: tuple = ()
    y_zero: Optional[np.ndarray] = None
    func: Optional[Callable] = None
    lipschitz: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("linear", "affine_zero", "custom"):
            raise InvalidInputError(f"unknown diffusion kind {self.kind!r}")
        if self.kind == "custom":
            if self.func is None or self.y_zero is None:
                raise InvalidInputError("custom diffusion needs func and y_zero")
            if not (self.lipschitz and self.lipschitz > 0):
                raise InvalidInputError("custom diffusion needs a positive Lipschitz constant")
            object.__setattr__(self, "y_zero", as_vector(self.y_zero, "y_zero"))
            return
        if not self.matrices:
            raise InvalidInputError(f"{self.kind} diffusion needs at least one matrix")
        mats = tuple(as_matrix(S, f"sigma[{j}]") for j, S in enumerate(self.matrices))
        n = mats[0].shape[0]
        for S in mats:
            if S.shape != (n, n):
                raise ShapeError("diffusion matrices must all be n x n")
        object.__setattr__(self, "matrices", mats)
        if self.kind == "affine_zero":
            if self.y_zero is None:
                raise InvalidInputError("affine_zero diffusion needs y_zero")
            object.__setattr__(self, "y_zero", as_vector(self.y_zero, "y_zero", dim=n))
        if self.lipschitz is None:
            L = sum(np.linalg.norm(S, 2) for S in mats)
            object.__setattr__(self, "lipschitz", float(max(L, 1e-300)))

    @classmethod
    def linear(cls, matrices):
        return cls("linear", tuple(matrices))

    @classmethod
    def affine_zero(cls, y_zero, matrices):
        return cls("affine_zero", tuple(matrices), y_zero=y_zero)

    @classmethod
    def custom(cls, func, lipschitz, y_zero, d):
        spec = cls("custom", y_zero=y_zero, func=func, lipschitz=float(lipschitz))
        object.__setattr__(spec, "_d", int(d))
        return spec

    @property
    def d(self):
        if self.kind == "custom":
            return self._d
        return len(self.matrices)

    def __call__(self, X):
        """Evaluate at a single state, returning an ``n x d`` matrix."""
        X = np.asarray(X, dtype=float)
        if self.kind == "custom":
            return np.asarray(self.func(X), dtype=float).reshape(X.shape[0], self.d)
        Z = X - self.y_zero if self.kind == "affine_zero" else X
        return np.stack([S @ Z for S in self.matrices], axis=1)

    def noise(self, X, dW):
        """``sigma(X) dW`` for a batch ``X`` of shape (P, n), ``dW`` of shape (P, d)."""
        if self.kind == "custom":
            return np.stack([self(Xp) @ w for Xp, w in zip(X, dW)])
        Z = X - self.y_zero if self.kind == "affine_zero" else X
        out = np.zeros_like(X)
        for j, S in enumerate(self.matrices):
            out += (Z @ S.T) * dW[:, j : j + 1]
        return out

    def to_dict(self):
        if self.kind == "custom":
            raise InvalidInputError("custom diffusion cannot be serialized")
        out = {"kind": self.kind, "matrices": [S.tolist() for S in self.matrices]}
        if self.kind == "affine_zero":
            out["y_zero"] = self.y_zero.tolist()
        return out


@dataclass(frozen=True)
class SolverOptions:
    """Integration settings. ``epsilon=None`` means ``rho * dt`` (see README)."""

    dt: Optional[float] = None
    epsilon: Optional[float] = None
    hit_tol: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Scenario:
    """Controlled SDE ``dX + A(t) X dt = sigma(X) dW + B(t) u dt`` with target y."""

    A: MatrixFunction
    B: MatrixFunction
    sigma: DiffusionSpec
    x: np.ndarray
    y: np.ndarray
    T: float
    rho: float
    solver: SolverOptions = field(default_factory=SolverOptions)
    validate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "A", MatrixFunction.coerce(self.A, "A"))
        object.__setattr__(self, "B", MatrixFunction.coerce(self.B, "B"))
        object.__setattr__(self, "x", as_vector(self.x, "x"))
        object.__setattr__(self, "y", as_vector(self.y, "y"))
        n = self.x.shape[0]
        if self.y.shape[0] != n:
            raise ShapeError("x and y must have the same length")
        if self.A.shape != (n, n):
            raise ShapeError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ShapeError(f"B must have {n} rows, got {self.B.shape}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInputError(f"T must be positive, got {self.T}")
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise InvalidInputError(f"rho must be nonnegative, got {self.rho}")
        if self.sigma.kind != "custom" and self.sigma.matrices[0].shape[0] != n:
            raise ShapeError("diffusion matrices do not match the state dimension")
        if self.validate:
            self.check_hypotheses()

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def d(self):
        return self.sigma.d

    def sample_times(self, t_samples=DEFAULT_T_SAMPLES):
        if self.A.is_constant and self.B.is_constant:
            return np.array([0.0])
        return np.linspace(0.0, self.T, t_samples)

    def check_hypotheses(self, t_samples=DEFAULT_T_SAMPLES):
        """Raise :class:`HypothesisError` if (i) or (ii) fails."""
        s = np.linalg.norm(self.sigma(self.y))
        if s > SIGMA_ZERO_TOL:
            raise HypothesisError(
                f"|sigma(y)| = {s:.3e} > {SIGMA_ZERO_TOL}: hypothesis (i) fails, "
                "the target must be a zero of the diffusion",
                hypothesis="i",
            )
        gamma = min(gamma_lower_bound(self.B(t)) for t in self.sample_times(t_samples))
        if gamma <= 0.0:
            raise HypothesisError(
                "gamma_lower_bound(B) = 0: hypothesis (ii) fails, B(t) B(t)^T is not positive definite",
                hypothesis="ii",
            )

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        out = {
            "n": self.n,
            "m": self.m,
            "d": self.d,
            "A": self.A.to_dict(),
            "B": self.B.to_dict(),
            "sigma": self.sigma.to_dict(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "T": self.T,
            "rho": self.rho,
        }
        solver = {k: v for k, v in vars(self.solver).items() if v is not None}
        if solver:
            out["solver"] = solver
        return out


def _read_structured(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def scenario_from_dict(data, validate=True):
    """Build a :class:`Scenario` from the documented key set.

    ``rho = {confidence = p}`` is resolved by inverting the success bound.
    """
    try:
        sig = data["sigma"]
        kind = sig.get("kind", "linear")
        if kind == "linear":
            sigma = DiffusionSpec.linear(sig["matrices"])
        elif kind == "affine_zero":
            sigma = DiffusionSpec.affine_zero(sig["y_zero"], sig["matrices"])
        else:
            raise InvalidInputError(f"sigma.kind {kind!r} cannot be read from a file")
        solver = data.get("solver", {})
        eps = solver.get("epsilon")
        opts = SolverOptions(
            dt=solver.get("dt"),
            epsilon=None if eps in (None, "auto") else float(eps),
            hit_tol=solver.get("hit_tol"),
        )
        rho = data["rho"]
        confidence = None
        if isinstance(rho, dict):
            confidence = float(rho["confidence"])
            rho = 0.0
        sc = Scenario(
            A=MatrixFunction.coerce(data["A"], "A"),
            B=MatrixFunction.coerce(data["B"], "B"),
            sigma=sigma,
            x=data["x"],
            y=data["y"],
            T=float(data["T"]),
            rho=float(rho),
            solver=opts,
            validate=validate,
        )
    except KeyError as exc:
        raise InvalidInputError(f"scenario is missing key {exc.args[0]!r}") from None
    for key, expect in (("n", sc.n), ("m", sc.m), ("d", sc.d)):
        if key in data and int(data[key]) != expect:
            raise ShapeError(f"declared {key} = {data[key]} but matrices imply {expect}")
    if confidence is not None:
        from .relay_control import bound_constants, rho_for_confidence

        rho = rho_for_confidence(bound_constants(sc), sc.x, sc.y, sc.T, confidence)
        sc = sc.with_(rho=rho)
    return sc


def load_scenario(path, validate=True):
    """Read a scenario file; returns ``(scenario, raw_dict)``."""
    data = _read_structured(path)
    return scenario_from_dict(data, validate=validate), data
