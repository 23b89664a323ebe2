"""Dense linear-algebra kernels built around lower-triangular Cholesky factors.

All functions are pure: inputs are never modified and results never alias
their arguments. A "precision factor" ``L`` satisfies ``L @ L.T == P`` where
``P`` is a precision matrix, so the covariance is ``inv(L @ L.T)``.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import lapack, solve_triangular

__all__ = [
    "NotPositiveDefinite",
    "cholesky",
    "jittered_cholesky",
    "chol_rank1_update",
    "tri_solve",
    "tri_inverse",
    "logdet_precision",
    "inv_trace_from_chol",
    "sample_gaussian",
]


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


def _as_square(A: ArrayLike) -> NDArray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {A.shape}")
    return A


def cholesky(A: ArrayLike) -> NDArray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Never adds jitter; see :func:`jittered_cholesky` for the explicit repair path.

    Raises:
        ValueError: if ``A`` is not square or not symmetric to 1e-10 relative.
        NotPositiveDefinite: if a pivot is not strictly positive.
    """
    A = _as_square(A)
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    if np.abs(A - A.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return L


def jittered_cholesky(
    A: ArrayLike, start: float = 1e-8, max_jitter: float = 1e-4
) -> tuple[NDArray, float]:
    """Cholesky with visible diagonal repair.

    Tries the plain factorization first, then adds ``start * I`` and doubles the
    jitter until it succeeds or exceeds ``max_jitter``.

    Returns:
        The factor and the jitter that was added (0.0 if none was needed).
    """
    A = _as_square(A)
    try:
        return cholesky(A), 0.0
    except NotPositiveDefinite:
        pass
    eye = np.eye(A.shape[0])
    jitter = start
    while jitter <= max_jitter:
        try:
            return cholesky(A + jitter * eye), jitter
        except NotPositiveDefinite:
            jitter *= 2.0
    raise NotPositiveDefinite(f"matrix not positive definite even with jitter {max_jitter:g}")


def chol_rank1_update(L: ArrayLike, v: ArrayLike) -> NDArray:
    """Return ``L'`` with ``L' L'^T = L L^T + v v^T`` in O(m^2).

    Uses the classic sequence of Givens-style rotations, column by column, so
    the result stays lower triangular with a positive diagonal.
    """
    L = np.array(L, dtype=float, copy=True)
    x = np.array(v, dtype=float, copy=True).reshape(-1)
    m = L.shape[0]
    if x.shape[0] != m:
        raise ValueError(f"dimension mismatch: L is {m}x{m}, v has {x.shape[0]} entries")
    for k in range(m):
        xk = x[k]
        if xk == 0.0:
            continue
        lkk = L[k, k]
        r = np.hypot(lkk, xk)
        c = r / lkk
        s = xk / lkk
        L[k, k] = r
        if k + 1 < m:
            col = L[k + 1 :, k]
            col += s * x[k + 1 :]
            col /= c
            x[k + 1 :] = c * x[k + 1 :] - s * col
    return L


def tri_solve(L: ArrayLike, b: ArrayLike, transpose: bool = False) -> NDArray:
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    """
    return solve_triangular(L, b, lower=True, trans=1 if transpose else 0, check_finite=False)


def tri_inverse(L: ArrayLike) -> NDArray:
    """Inverse of a lower-triangular matrix (lower triangular again)."""
    Linv, info = lapack.dtrtri(np.asarray(L, dtype=float), lower=1)
    if info != 0:
        raise NotPositiveDefinite(f"singular triangular factor (info={info})")
    return np.tril(Linv)


def logdet_precision(L: ArrayLike) -> float:
    """``log det(L L^T)`` as twice the sum of log-diagonal entries."""
    return float(2.0 * np.sum(np.log(np.diagonal(L))))


def inv_trace_from_chol(L: ArrayLike) -> float:
    """Trace of the covariance ``(L L^T)^{-1}``, i.e. ``||L^{-1}||_F^2``."""
    return float(np.sum(tri_inverse(L) ** 2))


def sample_gaussian(
    mean: ArrayLike,
    L_prec: ArrayLike,
    rng: np.random.Generator | None = None,
    z: ArrayLike | None = None,
) -> NDArray:
    """Draw from ``N(mean, (L L^T)^{-1})``.

    Args:
        mean: Mean vector of length m.
        L_prec: Lower Cholesky factor of the precision.
        rng: Generator for the standard-normal draw.
        z: Optional fixed standard-normal vector; overrides ``rng``.
    """
    mean = np.asarray(mean, dtype=float)
    if z is None:
        if rng is None:
            raise ValueError("either rng or z must be given")
        z = rng.standard_normal(mean.shape[0])
    return mean + tri_solve(L_prec, np.asarray(z, dtype=float), transpose=True)
