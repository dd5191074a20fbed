"""Dense numeric kernels shared by the rest of the package.

Matrices and vectors are plain ``numpy`` float64 arrays. Factorizations are
delegated to LAPACK through numpy/scipy; power iteration and the
Walsh-Hadamard transform are implemented here.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ConvergenceFailure, DimensionMismatch, NotPowerOfTwo, NotSPD

POWER_MAX_ITER = 1000
POWER_TOL = 1e-12
EXACT_NORM_DIM = 64


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    No pivoting and no silent regularization: a non-positive pivot raises
    :class:`NotSPD` so the caller can increase the damping instead.
    """
    A = _as_f64(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.abs(A).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise NotSPD("matrix is not symmetric")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(f"non-positive pivot in Cholesky factorization: {exc}") from None


def cho_solve(L: np.ndarray, b) -> np.ndarray:
    """Solve ``L L^T x = b`` given the lower factor ``L``."""
    y = scipy.linalg.solve_triangular(L, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(L.T, y, lower=False, check_finite=False)


def solve_spd(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    """
    A = _as_f64(A)
    b = _as_f64(b)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"cannot solve {A.shape} system with rhs {b.shape}")
    return cho_solve(cholesky(A), b)


def _power_sigma(A: np.ndarray, x: np.ndarray) -> tuple[float, bool]:
    """Largest eigenvalue of A^T A by power iteration from ``x``."""
    x = x / np.linalg.norm(x)
    prev = None
    for _ in range(POWER_MAX_ITER):
        y = A.T @ (A @ x)
        rq = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, False
        x = y / ny
        if prev is not None and abs(rq - prev) <= POWER_TOL * abs(rq):
            return rq, True
        prev = rq
    return rq, True


def spectral_norm(A) -> float:
    """Largest singular value of ``A``.

    Power iteration on ``A^T A`` from the normalized all-ones vector (falling
    back to a fixed pseudo-random start if that vector is annihilated). For
    matrices whose smaller side is at most 64 the result is cross-checked
    against a full SVD and the SVD value is returned on disagreement.
    """
    A = _as_f64(A)
    if A.ndim == 1:
        A = A[None, :]
    if A.size == 0 or not np.any(A):
        return 0.0
    lam, ok = _power_sigma(A, np.ones(A.shape[1]))
    if not ok:
        start = np.random.default_rng(0).standard_normal(A.shape[1])
        lam, _ = _power_sigma(A, start)
    sigma = float(np.sqrt(max(lam, 0.0)))
    if min(A.shape) <= EXACT_NORM_DIM:
        exact = float(np.linalg.svd(A, compute_uv=False)[0])
        if abs(exact - sigma) > 1e-12 * exact:
            sigma = exact
    return sigma


def svd_thin(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(S) Vt`` with non-increasing ``S``."""
    A = _as_f64(A)
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from None
    return U, S, Vt


def smallest_singular_value(A) -> float:
    return float(svd_thin(A)[1][-1])


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


def hadamard_transform(v) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform along the last axis.

    Works on a single vector or a stack of rows. Normalized by
    ``1/sqrt(dim)`` so the transform is an involution and preserves norms.
    Cost is O(dim log dim) per vector.
    """
    x = np.array(v, dtype=np.float64)
    d = x.shape[-1]
    if not is_power_of_two(d):
        raise NotPowerOfTwo(f"dimension {d} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < d:
        y = x.reshape(*lead, d // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] += b
        y[..., 1, :] = a - b
        x = y.reshape(*lead, d)
        h *= 2
    return x / np.sqrt(d)
