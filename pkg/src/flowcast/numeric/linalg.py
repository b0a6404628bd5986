"""Positive-definite linear algebra on dense arrays."""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization hits a non-positive pivot.

    ``minor`` is the (1-based) order of the first leading principal minor
    that is not positive definite.
    """

    def __init__(self, minor: int, size: int):
        self.minor = minor
        self.size = size
        super().__init__(
            f"matrix of order {size} is not positive definite: "
            f"leading minor of order {minor} failed"
        )


def _check_square(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    return M


def _first_failing_minor(M: np.ndarray) -> int:
    for k in range(1, M.shape[0] + 1):
        try:
            np.linalg.cholesky(M[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return M.shape[0]


def cholesky(M: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    No pivoting. A non-positive pivot raises :class:`NotPositiveDefiniteError`
    naming the offending leading minor.
    """
    M = _check_square(M)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(_first_failing_minor(M), M.shape[0]) from None
    if not np.all(np.diag(L) > 0):
        k = int(np.argmin(np.diag(L) > 0)) + 1
        raise NotPositiveDefiniteError(k, M.shape[0])
    return L


def log_det_pd(M: np.ndarray) -> float:
    """ln det(M) for symmetric positive-definite ``M`` via Cholesky."""
    L = cholesky(M)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def solve_pd(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``M X = B`` for symmetric positive-definite ``M``.

    ``B`` may be a vector or a matrix whose row count equals the order of M.
    """
    L = cholesky(M)
    B = np.asarray(B, dtype=float)
    if B.shape[0] != L.shape[0]:
        raise ValueError(f"row count {B.shape[0]} does not match matrix order {L.shape[0]}")
    Z = solve_triangular(L, B, lower=True, check_finite=False)
    return solve_triangular(L.T, Z, lower=False, check_finite=False)


def inv_pd(M: np.ndarray) -> np.ndarray:
    M = _check_square(M)
    return solve_pd(M, np.eye(M.shape[0]))
