"""Dense float64 linear algebra used by the calibration engine.

All matrices are row-major numpy float64 arrays. Symmetric matrices are
stored dense and symmetrized exactly on construction; every public
operation validates finiteness on the way in and out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimMismatch, NonFinite, NotPositiveDefinite

__all__ = [
    "as_matrix",
    "as_sym_matrix",
    "symmetrize",
    "require_finite",
    "CholeskyFactor",
    "cholesky",
    "cholesky_inverse",
    "inverse_upper_factor",
]


def require_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return a


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return a 2-D float64 row-major matrix."""
    m = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if m.ndim != 2:
        raise DimMismatch(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimMismatch(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimMismatch(f"expected {cols} cols, got {m.shape[1]}")
    return require_finite(m, "matrix")


def symmetrize(a) -> np.ndarray:
    """Return (a + a.T) / 2 so that data[j, k] == data[k, j] exactly."""
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimMismatch(f"cannot symmetrize a {m.shape[0]}x{m.shape[1]} matrix")
    return (m + m.T) / 2.0


def as_sym_matrix(a) -> np.ndarray:
    """Validate a square matrix that is already exactly symmetric."""
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimMismatch(f"expected square matrix, got {m.shape}")
    if m.shape[0] < 1:
        raise DimMismatch("symmetric matrix must have dim >= 1")
    if not np.array_equal(m, m.T):
        raise DimMismatch("matrix is not exactly symmetric; use symmetrize() first")
    return m


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T reconstructing the source."""

    dim: int
    lower: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return symmetrize(self.lower @ self.lower.T)


def cholesky(m) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix.

    Raises NotPositiveDefinite when the matrix is singular or indefinite;
    the documented recovery is diagonal damping (hessian.regularize) and retry.
    """
    sym = as_sym_matrix(m)
    try:
        lower = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if not np.all(np.diag(lower) > 0.0):
        raise NotPositiveDefinite("factor has a non-positive diagonal entry")
    return CholeskyFactor(dim=sym.shape[0], lower=lower)


def cholesky_inverse(f: CholeskyFactor) -> np.ndarray:
    """Explicit symmetric inverse of the factored matrix."""
    inv = scipy.linalg.cho_solve((f.lower, True), np.eye(f.dim))
    require_finite(inv, "inverse")
    return symmetrize(inv)


def inverse_upper_factor(h) -> np.ndarray:
    """Upper-triangular U with U.T @ U == inverse(h).

    Row q of U carries the trailing-submatrix inverse information used by the
    sequential column updates: for the active set {q..n}, the inverse of the
    restricted matrix satisfies inv_qq == U[q,q]**2 and inv[q, k] == U[q,q]*U[q,k].
    """
    inv = cholesky_inverse(cholesky(h))
    return cholesky(inv).lower.T.copy()
