"""Small dense linear algebra, the multivalued sign map and its
regularizations, and controllability primitives.

Everything here is a pure function of its arguments. Vectors may carry
leading batch axes; the vector index is always the last axis.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import InvalidInputError, RankDeficiencyError, ShapeError

RANK_RTOL = 1e-10
GRAMIAN_COND_MAX = 1e14


def as_matrix(M, name="matrix", rows=None, cols=None):
    """Validate and return ``M`` as a finite float 2-D array."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise ShapeError(f"{name} must have {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} columns, got {M.shape[1]}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return M


def as_vector(v, name="vector", dim=None):
    """Validate and return ``v`` as a finite float 1-D array."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"{name} must have length {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class SignRegularization:
    """Single-valued surrogate for the multivalued sign map.

    ``kind`` is ``"smoothed"`` (parameter is the band width epsilon) or
    ``"yosida"`` (parameter is the resolvent step lambda).
    """

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in ("smoothed", "yosida"):
            raise InvalidInputError(f"unknown regularization kind {self.kind!r}")
        if not (np.isfinite(self.param) and self.param > 0):
            raise InvalidInputError(f"{self.kind} parameter must be positive, got {self.param}")

    @classmethod
    def smoothed(cls, eps):
        return cls("smoothed", float(eps))

    @classmethod
    def yosida(cls, lam):
        return cls("yosida", float(lam))


def sign_smoothed(v, eps):
    """Return ``v / max(|v|, eps)`` along the last axis.

    Agrees with ``v/|v|`` once ``|v| >= eps`` and picks the zero selection
    of the unit ball at the origin.
    """
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps}")
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("sign_smoothed: non-finite input")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def yosida_sign_band(B, lam, rho, tol=1e-10):
    """Band width for which the smoothed sign equals the Yosida approximation.

    For ``F(X) = rho * B sign(B^T (X - y))`` with square ``B`` satisfying
    ``B B^T = c I`` the resolvent reduces to soft shrinkage of ``B^T(X - y)``
    with threshold ``lam * rho * c``, and the Yosida approximation is
    ``rho * B * sign_smoothed(B^T (X - y), lam * rho * c)``.
    """
    B = as_matrix(B, "B")
    n, m = B.shape
    if n != m:
        raise ShapeError("Yosida regularization needs a square B")
    BBt = B @ B.T
    c = np.trace(BBt) / n
    if c <= 0 or np.linalg.norm(BBt - c * np.eye(n)) > tol * (1.0 + c):
        raise InvalidInputError("Yosida regularization needs B B^T = c I with c > 0")
    return lam * rho * c


def gamma_lower_bound(B):
    """Largest gamma with ``B B^T >= gamma^2 I``."""
    B = as_matrix(B, "B")
    lam_min = np.linalg.eigvalsh(B @ B.T)[0]
    return float(np.sqrt(max(lam_min, 0.0)))


def matrix_exp(M):
    """Matrix exponential (scaling and squaring with a Pade core).

    Accepts a stack of square matrices along leading axes.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ShapeError(f"matrix_exp needs square matrices, got shape {M.shape}")
    return scipy.linalg.expm(M)


def numerical_rank(M, rtol=RANK_RTOL):
    """Rank with singular values below ``rtol * sigma_max`` treated as zero."""
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def controllability_matrix_rank(A, B):
    """Return ``([B, AB, ..., A^{n-1} B], rank)``."""
    A = as_matrix(A, "A")
    n = A.shape[0]
    if A.shape[1] != n:
        raise ShapeError("A must be square")
    B = as_matrix(B, "B", rows=n)
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    C = np.hstack(blocks)
    return C, numerical_rank(C)


def controllability_gramian(A, B, T, steps=1000):
    """``int_0^T e^{-As} B B^T e^{-A^T s} ds`` by composite Simpson.

    ``steps`` is the number of Simpson panels (two subintervals each).
    """
    A = as_matrix(A, "A")
    n = A.shape[0]
    B = as_matrix(B, "B", rows=n)
    if not T > 0:
        raise InvalidInputError(f"T must be positive, got {T}")
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    nodes = 2 * steps
    h = T / nodes
    E = matrix_exp(-A * h)
    BBt = B @ B.T
    G = np.zeros((n, n))
    Phi = np.eye(n)
    for i in range(nodes + 1):
        w = 1.0 if i in (0, nodes) else (4.0 if i % 2 else 2.0)
        G += w * (Phi @ BBt @ Phi.T)
        Phi = E @ Phi
    G *= h / 3.0
    return 0.5 * (G + G.T)


def check_gramian(G):
    """Raise if ``G`` is too ill-conditioned to invert."""
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > GRAMIAN_COND_MAX:
        raise RankDeficiencyError(
            f"controllability Gramian is singular (condition number {cond:.3g}); "
            "the rank condition fails or T is too short"
        )
    return cond


def pseudo_left_inverse(B):
    """``(B^T B)^{-1} B^T`` for ``B`` of full column rank."""
    B = as_matrix(B, "B")
    m = B.shape[1]
    if numerical_rank(B) < m:
        raise RankDeficiencyError(f"B has column rank < {m}; no left inverse")
    return np.linalg.solve(B.T @ B, B.T)


def log_norm(M):
    """Logarithmic 2-norm: largest eigenvalue of the symmetric part."""
    M = as_matrix(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
