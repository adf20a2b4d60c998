"""Dense linear algebra, iterative solvers, 1-D optimal transport and
finite-difference helpers shared by the solvers and the verification suite.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sl

PIVOT_TOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a direct solve meets a (numerically) zero pivot."""


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def lu_factor(a) -> tuple[np.ndarray, np.ndarray]:
    """LU factorization with partial pivoting and a scaled pivot check.

    Returns the LAPACK ``(lu, piv)`` pair so several right-hand sides can
    reuse the factorization.
    """
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sl.LinAlgWarning)
        lu, piv = sl.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() < PIVOT_TOL * scale:
        raise SingularMatrixError(
            f"singular matrix: smallest pivot {pivots.min():.3e} "
            f"(threshold {PIVOT_TOL * scale:.3e})"
        )
    return lu, piv


def linear_solve(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` by LU with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides.

    Raises
    ------
    SingularMatrixError
        If a pivot falls below ``1e-12`` relative to ``max|a|``.
    """
    a = _as_matrix(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {a.shape[0]}")
    lu, piv = lu_factor(a)
    return sl.lu_solve((lu, piv), b, check_finite=False)


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    converged: bool
    n_iter: int
    residual_norm: float


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b,
    tol: float = 1e-10,
    max_iter: int = 50,
    damping: float = 1e-3,
    x0=None,
) -> CGResult:
    """Solve ``(A + damping * I) x = b`` for a symmetric PSD operator ``A``.

    ``matvec`` is only ever called on vectors; the operator is never formed.
    Convergence means ``||r|| <= tol * ||b||``. Non-convergence is reported
    via ``CGResult.converged``, never raised.
    """
    if damping < 0:
        raise ValueError("damping must be non-negative")
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), True, 0, 0.0)

    def op(v):
        return np.asarray(matvec(v), dtype=float) + damping * v

    r = b - op(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    threshold = tol * bnorm
    if math.sqrt(rr) <= threshold:
        return CGResult(x, True, 0, math.sqrt(rr))
    for k in range(1, max_iter + 1):
        ap = op(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            # operator is not positive definite along p; stop with what we have
            return CGResult(x, False, k - 1, math.sqrt(rr))
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= threshold:
            return CGResult(x, True, k, math.sqrt(rr_new))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, False, max_iter, math.sqrt(rr))


def ridge_solve(phi, y, lam: float) -> np.ndarray:
    """Closed-form ridge weights ``(phi.T phi + lam I)^-1 phi.T y``.

    ``y`` may be a vector or a matrix with one column per target.
    """
    if lam < 0:
        raise ValueError("ridge lambda must be >= 0")
    phi = _as_matrix(phi)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != phi.shape[0]:
        raise ValueError(f"phi has {phi.shape[0]} rows, y has {y.shape[0]}")
    gram = phi.T @ phi
    gram[np.diag_indices_from(gram)] += lam
    return linear_solve(gram, phi.T @ y)


def wasserstein2_1d(mu, nu) -> float:
    """W2 distance between two equal-weight empirical measures on the line.

    The sorted (quantile) coupling is optimal in one dimension.
    """
    x = np.sort(np.asarray(mu, dtype=float).ravel())
    y = np.sort(np.asarray(nu, dtype=float).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("empirical measure must be non-empty")
    if x.size != y.size:
        raise ValueError(f"sample counts differ: {x.size} vs {y.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    return math.sqrt(float(np.mean((x - y) ** 2)))


def _check_finite(value: float, where: str) -> float:
    if not math.isfinite(value):
        warnings.warn(f"non-finite function value in {where}", RuntimeWarning, stacklevel=3)
    return value


def finite_diff(f: Callable[[float], float], x: float, h: float = 1e-3) -> float:
    """Fourth-order central difference estimate of ``f'(x)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    # paired differences: exact zero when f is flat, less cancellation otherwise
    val = (8 * (f(x + h) - f(x - h)) - (f(x + 2 * h) - f(x - 2 * h))) / (12 * h)
    return _check_finite(float(val), "finite_diff")


def second_diff(f: Callable[[float], float], x: float, h: float = 1e-3) -> float:
    """Second-order central estimate of ``f''(x)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    val = (f(x + h) - 2 * f(x) + f(x - h)) / (h * h)
    return _check_finite(float(val), "second_diff")


def richardson_second_diff(
    f: Callable[[float], float], x: float = 0.0, steps=(1e-2, 5e-3, 2.5e-3)
) -> float:
    """``f''(x)`` from second differences on a halving ladder, extrapolated.

    Each halving removes the next even power of the step from the error.
    """
    steps = tuple(steps)
    table = [second_diff(f, x, h) for h in steps]
    ratio = steps[0] / steps[1]
    power = 2
    while len(table) > 1:
        factor = ratio**power
        table = [(factor * table[i + 1] - table[i]) / (factor - 1) for i in range(len(table) - 1)]
        power += 2
    return table[0]
