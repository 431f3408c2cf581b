"""Dense symmetric-matrix calculus.

Matrix exponential and logarithm through a symmetric eigendecomposition,
upper Cholesky factors, the skew-symmetric exponential and the bijection
between symmetric matrices and vectors of their upper triangle.

All functions accept a single ``(n, n)`` matrix or a stack ``(..., n, n)``.
"""

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import (ConvergenceError, DimensionError, InvalidInputError,
                     NotPositiveDefiniteError)

EIG_TOL = 1e-13
EIG_MAX_SWEEPS = 100
PIVOT_TOL = 1e-14
SYM_TOL = 1e-10


class SpectralDecomp(NamedTuple):
    """Eigenvalues in ascending order and orthonormal eigenvectors (columns)."""

    eigvals: np.ndarray
    eigvecs: np.ndarray


def _as_stack(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"{name} must have shape (..., n, n), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    lead = a.shape[:-2]
    n = a.shape[-1]
    return a.reshape((-1, n, n)), lead


def symmetrize(g, name="matrix"):
    """Return ``(g + g^T)/2`` after checking that ``g`` is symmetric.

    Raises
    ------
    InvalidInputError
        If the relative asymmetry exceeds ``1e-10``.
    """
    a, lead = _as_stack(g, name)
    gap = np.abs(a - a.transpose(0, 2, 1)).max(initial=0.0)
    scale = max(np.abs(a).max(initial=0.0), 1.0)
    if gap > SYM_TOL * scale:
        raise InvalidInputError(f"{name} is not symmetric (asymmetry {gap:.3e})")
    out = 0.5 * (a + a.transpose(0, 2, 1))
    return out.reshape(lead + a.shape[1:])


def spectral(g):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Parameters
    ----------
    g : array_like, shape (..., n, n)
        Symmetric matrices.

    Returns
    -------
    SpectralDecomp
        ``eigvals`` of shape (..., n) ascending and ``eigvecs`` (..., n, n).
    """
    a, lead = _as_stack(symmetrize(g))
    n = a.shape[-1]
    if a.shape[0] == 0:
        return SpectralDecomp(np.zeros(lead + (n,)), np.zeros(lead + (n, n)))
    w, v, sweeps = kernels.jacobi_eigh(a, EIG_TOL, EIG_MAX_SWEEPS)
    if np.any(sweeps < 0):
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge in {EIG_MAX_SWEEPS} sweeps")
    return SpectralDecomp(w.reshape(lead + (n,)), v.reshape(lead + (n, n)))


def sym_func(g, func):
    """Apply a scalar function to a symmetric matrix through its spectrum."""
    w, v = spectral(g)
    out = (v * func(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def sym_exp(g):
    """Matrix exponential of symmetric matrices.

    Examples
    --------
    >>> sym_exp(np.diag([np.log(2.0), np.log(3.0)])).round(12)
    array([[2., 0.],
           [0., 3.]])
    """
    return sym_func(g, np.exp)


def sym_log(k0):
    """Matrix logarithm of symmetric positive-definite matrices.

    Raises
    ------
    NotPositiveDefiniteError
        If any input fails the Cholesky test.
    """
    chol_upper(k0)
    w, v = spectral(k0)
    if np.any(w <= 0.0):
        raise NotPositiveDefiniteError("matrix has a non-positive eigenvalue")
    out = (v * np.log(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def chol_upper(k):
    """Upper-triangular ``U`` with ``U^T U = k``.

    A pivot below ``1e-14 * trace(k)`` is treated as a failure.

    Raises
    ------
    NotPositiveDefiniteError
        With ``pivot`` (zero-based) and, for stacks, the flat ``index`` of the
        first failing matrix.
    """
    a, lead = _as_stack(symmetrize(k))
    n = a.shape[-1]
    if a.shape[0] == 0:
        return np.zeros(lead + (n, n))
    u, info = kernels.chol_upper(a, PIVOT_TOL)
    bad = np.flatnonzero(info >= 0)
    if bad.size:
        i = int(bad[0])
        raise NotPositiveDefiniteError(
            f"not positive definite: pivot {int(info[i])} failed"
            + (f" in matrix {i}" if lead else ""),
            pivot=int(info[i]), index=i if lead else None)
    return u.reshape(lead + (n, n))


def is_spd(k):
    """Boolean mask of matrices passing the Cholesky test."""
    a, lead = _as_stack(k)
    a = 0.5 * (a + a.transpose(0, 2, 1))
    _, info = kernels.chol_upper(a, PIVOT_TOL)
    return (info < 0).reshape(lead)


def eigvalsh(g):
    """Ascending eigenvalues of symmetric matrices."""
    return spectral(g).eigvals


def n_sym(n):
    """Number of entries ``n(n+1)/2`` of a symmetric ``n x n`` matrix."""
    return n * (n + 1) // 2


def dim_from_nsym(n_w):
    """Invert ``n_w = n(n+1)/2``.

    Raises
    ------
    DimensionError
        If ``n_w`` is not a triangular number.
    """
    n = int(round((np.sqrt(8 * n_w + 1) - 1) / 2))
    if n < 1 or n_sym(n) != n_w:
        raise DimensionError(f"length {n_w} is not n(n+1)/2 for any n")
    return n


def sym_index(i, j):
    """One-based vector position of entry ``(i, j)``, ``1 <= i <= j``."""
    if i > j:
        i, j = j, i
    return i + j * (j - 1) // 2


@lru_cache(maxsize=None)
def _tri_indices(n):
    rows, cols = [], []
    for j in range(n):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def sym_vec(g):
    """Stack the upper triangle column by column.

    Entry ``(i, j)`` with ``i <= j`` (one-based) goes to position
    ``i + j(j-1)/2``.
    """
    a = np.asarray(g, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"expected (..., n, n), got {a.shape}")
    rows, cols = _tri_indices(a.shape[-1])
    return a[..., rows, cols]


def vec_sym(w, n=None):
    """Inverse of :func:`sym_vec`.

    Raises
    ------
    DimensionError
        If the last axis length is not ``n(n+1)/2``.
    """
    w = np.asarray(w, dtype=np.float64)
    n_w = w.shape[-1]
    if n is None:
        n = dim_from_nsym(n_w)
    elif n_sym(n) != n_w:
        raise DimensionError(f"length {n_w} does not match n={n}")
    rows, cols = _tri_indices(n)
    out = np.zeros(w.shape[:-1] + (n, n))
    out[..., rows, cols] = w
    out[..., cols, rows] = w
    return out


@lru_cache(maxsize=None)
def frobenius_weights(n):
    """Weights making the plain dot product of ``sym_vec`` vectors equal the
    Frobenius inner product: 1 on the diagonal, 2 off it."""
    rows, cols = _tri_indices(n)
    wts = np.where(rows == cols, 1.0, 2.0)
    wts.setflags(write=False)
    return wts


def skew_exp(s):
    """Exponential of skew-symmetric matrices.

    With ``M = -S^2 = S^T S`` symmetric positive semi-definite, the series of
    ``exp(S)`` splits into even and odd powers::

        exp(S) = cos(M^(1/2)) + sinc(M^(1/2)) S

    where both matrix functions come from one symmetric eigendecomposition.
    Each eigenvalue ``theta^2`` of ``M`` belongs to a plane rotation by
    ``theta``, so the result is orthogonal to rounding error.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise DimensionError(f"expected (..., n, n), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("skew matrix has non-finite entries")
    gap = np.abs(s + np.swapaxes(s, -1, -2)).max(initial=0.0)
    if gap > SYM_TOL * max(np.abs(s).max(initial=0.0), 1.0):
        raise InvalidInputError(f"matrix is not skew-symmetric (gap {gap:.3e})")
    s = 0.5 * (s - np.swapaxes(s, -1, -2))
    n = s.shape[-1]
    if n == 0:
        return np.zeros(s.shape)
    m = np.swapaxes(s, -1, -2) @ s
    w, v = spectral(0.5 * (m + np.swapaxes(m, -1, -2)))
    theta = np.sqrt(np.clip(w, 0.0, None))
    cos_t = np.cos(theta)
    small = theta < 1e-4
    th2 = theta * theta
    sinc_t = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0,
                      np.sin(theta) / np.where(small, 1.0, theta))
    vt = np.swapaxes(v, -1, -2)
    c = (v * cos_t[..., None, :]) @ vt
    f = (v * sinc_t[..., None, :]) @ vt
    return c + f @ s
