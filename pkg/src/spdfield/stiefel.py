"""Minimal parametrization of the compact Stiefel manifold.

A point is an ``N x m`` matrix with orthonormal columns.  Given a base point
``a`` and tangent parameters ``z`` of length ``nu = mN - m(m+1)/2`` the maps
here return another point ``y``.  The full map forms the ``N x N`` rotation
explicitly; the reduced one only touches ``N x m`` blocks and costs
``O(N m^2)``.
"""

import numpy as np

from . import matalg
from .errors import DimensionError, InvalidInputError

ORTHO_TOL = 1e-10
RANK_TOL = 1e-12


def n_params(n_rows, m):
    """Manifold dimension ``mN - m(m+1)/2``."""
    if m < 0 or n_rows < m:
        raise DimensionError(f"need 0 <= m <= N, got N={n_rows}, m={m}")
    return m * n_rows - m * (m + 1) // 2


def manifold_residual(y):
    """``||y^T y - I_m||_F``."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(y.T @ y - np.eye(y.shape[1])))


def check_point(y, tol=ORTHO_TOL):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] > y.shape[0]:
        raise DimensionError(f"Stiefel point must be N x m with m <= N, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("Stiefel point has non-finite entries")
    res = manifold_residual(y)
    if res > tol:
        raise InvalidInputError(f"columns are not orthonormal (residual {res:.3e})")
    return y


class Householder:
    """Householder QR ``x = Q R`` with ``R_ii >= 0``.

    The reflectors are kept in compact form so that ``Q`` (or the full
    ``N x N`` orthogonal factor) can be applied in ``O(N m)`` per column.

    Parameters
    ----------
    x : array_like, shape (N, m)
        ``m <= N``.
    """

    def __init__(self, x):
        a = np.array(x, dtype=np.float64)
        n_rows, m = a.shape
        if m > n_rows:
            raise DimensionError("Householder QR needs at least as many rows as columns")
        vecs = np.zeros((n_rows, m))
        betas = np.zeros(m)
        for k in range(m):
            col = a[k:, k]
            norm = np.linalg.norm(col)
            if norm == 0.0:
                continue
            alpha = -norm if col[0] >= 0 else norm
            v = col.copy()
            v[0] -= alpha
            beta = 2.0 / (v @ v)
            a[k:, k:] -= beta * np.outer(v, v @ a[k:, k:])
            a[k + 1:, k] = 0.0
            vecs[k:, k] = v
            betas[k] = beta
        r = np.triu(a[:m, :m])
        self.signs = np.where(np.diag(r) < 0, -1.0, 1.0)
        self.r = r * self.signs[:, None]
        self.vecs = vecs
        self.betas = betas
        self.shape = (n_rows, m)

    def apply(self, c):
        """``H_1 ... H_m c``, i.e. multiply by the full orthogonal factor."""
        c = np.array(c, dtype=np.float64)
        for k in range(self.shape[1] - 1, -1, -1):
            if self.betas[k]:
                v = self.vecs[k:, k]
                c[k:] -= self.betas[k] * np.outer(v, v @ c[k:])
        return c

    def apply_transpose(self, c):
        c = np.array(c, dtype=np.float64)
        for k in range(self.shape[1]):
            if self.betas[k]:
                v = self.vecs[k:, k]
                c[k:] -= self.betas[k] * np.outer(v, v @ c[k:])
        return c

    def q(self):
        """Thin factor ``N x m`` with the sign convention applied."""
        n_rows, m = self.shape
        e = np.zeros((n_rows, m))
        e[np.arange(m), np.arange(m)] = 1.0
        return self.apply(e) * self.signs

    def full(self):
        """Full ``N x N`` orthogonal factor (first ``m`` columns sign-fixed)."""
        n_rows, m = self.shape
        out = self.apply(np.eye(n_rows))
        out[:, :m] *= self.signs
        return out


def qr(x):
    """Thin QR with ``R_ii >= 0``."""
    h = Householder(x)
    return h.q(), h.r


def pack_s(z, m, n_rows):
    """Skew ``A`` (m x m) and ``B`` ((N-m) x m) from tangent parameters.

    The strict upper triangle of ``A`` is filled column by column, then
    ``B`` column-major.
    """
    z = np.asarray(z, dtype=np.float64)
    nu = n_params(n_rows, m)
    if z.shape != (nu,):
        raise DimensionError(f"expected {nu} tangent parameters, got {z.shape}")
    n_skew = m * (m - 1) // 2
    rows, cols = np.triu_indices(m, 1)
    order = np.lexsort((rows, cols))
    skew = np.zeros((m, m))
    skew[rows[order], cols[order]] = z[:n_skew]
    skew -= skew.T
    block = z[n_skew:].reshape((n_rows - m, m), order="F")
    return skew, block.copy()


def unpack_s(skew, block):
    """Inverse of :func:`pack_s`."""
    skew = np.asarray(skew, dtype=np.float64)
    block = np.asarray(block, dtype=np.float64)
    m = skew.shape[0]
    rows, cols = np.triu_indices(m, 1)
    order = np.lexsort((rows, cols))
    return np.concatenate([skew[rows[order], cols[order]], block.ravel(order="F")])


def _rotation_block(skew, coupling, t):
    m = skew.shape[0]
    k = coupling.shape[0]
    gen = np.zeros((m + k, m + k))
    gen[:m, :m] = skew
    gen[m:, :m] = coupling
    gen[:m, m:] = -coupling.T
    return matalg.skew_exp(t * gen)[:, :m]


class StiefelChart:
    """Both maps around a fixed base point, reusing its QR factorization.

    Parameters
    ----------
    a : array_like, shape (N, m)
        Base point with orthonormal columns.
    t : float
        Step scale multiplying the tangent generator.
    """

    def __init__(self, a, t=1.0):
        self.a = check_point(a).copy()
        self.a.setflags(write=False)
        if t <= 0:
            raise InvalidInputError("step scale t must be positive")
        self.t = float(t)
        self.n_rows, self.m = self.a.shape
        self.nu = n_params(self.n_rows, self.m)
        self._house = Householder(self.a)
        if np.any(np.abs(np.diag(self._house.r)) < RANK_TOL):
            raise InvalidInputError("base point is rank deficient")

    def complement_times(self, block):
        """``a_perp @ block`` without forming ``a_perp``."""
        padded = np.zeros((self.n_rows, block.shape[1]))
        padded[self.m:] = block
        return self._house.apply(padded)

    def complement(self):
        return self._house.full()[:, self.m:]

    def full(self, z):
        """Map through the explicit ``N x N`` rotation, ``O(N^3)``."""
        skew, block = pack_s(z, self.m, self.n_rows)
        basis = np.hstack([self.a, self.complement()])
        return basis @ _rotation_block(skew, block, self.t)

    def reduced(self, z):
        """Map through the QR factors of ``a_perp B``, ``O(N m^2)``."""
        skew, block = pack_s(z, self.m, self.n_rows)
        if self.m == self.n_rows:
            return self.a @ matalg.skew_exp(self.t * skew)
        q, r = qr(self.complement_times(block))
        rot = _rotation_block(skew, r, self.t)
        return self.a @ rot[:self.m] + q @ rot[self.m:]

    __call__ = reduced


def orth_complement(a):
    """Columns ``m+1..N`` of the orthogonal QR factor of ``a``."""
    return StiefelChart(a).complement()


def map_full(a, z, t=1.0):
    return StiefelChart(a, t).full(z)


def map_reduced(a, z, t=1.0):
    return StiefelChart(a, t).reduced(z)


def polar_factor(x):
    """Closest matrix with orthonormal columns in Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(x, dtype=np.float64), full_matrices=False)
    return u @ vt
