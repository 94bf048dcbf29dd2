"""Dense linear-algebra kernel.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. LAPACK (via
scipy) does the heavy lifting; this module adds input validation, a
deterministic SVD sign/order convention and the right-sided triangular solves
used for whitening.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import CholeskyError, ShapeError, SingularFactorError, SvdConvergenceError

# Relative gap under which two singular values count as one repeated value.
_TIE_RTOL = 1e-12


class Svd(NamedTuple):
    u: np.ndarray      # m x r, orthonormal columns
    sigma: np.ndarray  # r, descending
    vt: np.ndarray     # r x n, orthonormal rows


def as_mat(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (copying only when needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # Largest-magnitude entry of each u column made non-negative; argmax picks
    # the lowest row index on ties.
    if u.shape[1] == 0:
        return
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0


def _order_ties(u: np.ndarray, sigma: np.ndarray, vt: np.ndarray) -> None:
    r = sigma.shape[0]
    scale = sigma[0] if r else 0.0
    start = 0
    while start < r:
        stop = start + 1
        while stop < r and sigma[start] - sigma[stop] <= _TIE_RTOL * max(scale, 1e-300):
            stop += 1
        if stop - start > 1:
            block = list(range(start, stop))
            # descending lexicographic order of the sign-fixed u columns
            block.sort(key=lambda j: tuple(u[:, j]), reverse=True)
            perm = np.array(block)
            u[:, start:stop] = u[:, perm]
            vt[start:stop, :] = vt[perm, :]
            sigma[start:stop] = sigma[perm]
        start = stop


def svd(a) -> Svd:
    """Thin SVD with a deterministic sign convention.

    For each left singular vector the entry of largest magnitude is made
    non-negative (lowest row wins ties) and the matching right vector is
    flipped with it. Columns sharing a repeated singular value are ordered
    by descending lexicographic order of their sign-fixed ``u`` columns.
    """
    a = as_mat(a, "svd input")
    m, n = a.shape
    if m == 0 or n == 0:
        raise ShapeError(f"svd input must be non-empty, got {m}x{n}")
    try:
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SvdConvergenceError(f"SVD did not converge for {m}x{n} matrix") from exc
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    s = np.maximum(s, 0.0)
    _fix_signs(u, vt)
    _order_ties(u, s, vt)
    return Svd(u, s, vt)


def cholesky_ridge(c, lam: float) -> np.ndarray:
    """Lower-triangular ``S`` with ``S @ S.T == c + lam * I``."""
    c = as_mat(c, "second moment")
    n, n2 = c.shape
    if n != n2:
        raise ShapeError(f"cholesky_ridge needs a square matrix, got {n}x{n2}")
    if lam < 0:
        raise ValueError(f"ridge must be non-negative, got {lam}")
    asym = np.max(np.abs(c - c.T), initial=0.0)
    if asym > 1e-9 * max(1.0, np.max(np.abs(c), initial=0.0)):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    reg = 0.5 * (c + c.T) + lam * np.eye(n)
    try:
        s = scipy.linalg.cholesky(reg, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise CholeskyError(
            f"{n}x{n} matrix plus ridge {lam:g} is not positive definite; use a larger ridge"
        ) from exc
    if np.any(np.diag(s) <= 0):
        raise CholeskyError(f"non-positive pivot with ridge {lam:g}; use a larger ridge")
    return s


def _check_factor(s: np.ndarray, inner: int, what: str) -> np.ndarray:
    s = as_mat(s, "triangular factor")
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"triangular factor must be square, got {s.shape}")
    if inner != s.shape[0]:
        raise ShapeError(f"{what} has {inner} columns but factor is {s.shape[0]}x{s.shape[0]}")
    if np.any(np.diag(s) == 0):
        raise SingularFactorError("triangular factor has a zero diagonal entry")
    return s


def solve_right_inverse_transpose(g, s) -> np.ndarray:
    """Return ``H`` with ``H @ s.T == g`` for lower-triangular ``s``."""
    g = as_mat(g, "gradient")
    s = _check_factor(s, g.shape[1], "gradient")
    # H S^T = G  <=>  S H^T = G^T
    return scipy.linalg.solve_triangular(s, g.T, lower=True, check_finite=False).T


def solve_right_inverse(m, s) -> np.ndarray:
    """Return ``Z`` with ``Z @ s == m`` for lower-triangular ``s``."""
    m = as_mat(m, "matrix")
    s = _check_factor(s, m.shape[1], "matrix")
    # Z S = M  <=>  S^T Z^T = M^T
    return scipy.linalg.solve_triangular(s, m.T, lower=True, trans="T", check_finite=False).T


def frob_inner(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frob_inner shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def effective_rank(sigma, tau: float) -> int:
    """Smallest k whose leading squared singular values hold a ``tau`` energy fraction."""
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim != 1 or sig.size == 0:
        raise ValueError("sigma must be a non-empty 1-D sequence")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if np.any(sig < 0) or np.any(np.diff(sig) > 0):
        raise ValueError("sigma must be non-negative and descending")
    energy = np.cumsum(sig**2)
    total = energy[-1]
    if total <= 0:
        raise ValueError("effective rank undefined for an all-zero spectrum")
    frac = energy / total
    # cumulative sums can land a hair below 1.0 at the tail
    frac[-1] = 1.0
    return int(np.searchsorted(frac, tau, side="left")) + 1


def numerical_rank(a, rtol: float = 1e-8) -> int:
    """Number of singular values above ``rtol * sigma_1``."""
    sig = scipy.linalg.svdvals(as_mat(a))
    if sig.size == 0 or sig[0] == 0:
        return 0
    return int(np.count_nonzero(sig > rtol * sig[0]))
