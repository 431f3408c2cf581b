"""Karhunen-Loeve reduction and polynomial chaos of symmetric-matrix fields.

Fields live on mesh nodes and are stored through :func:`matalg.sym_vec`,
giving ``n_w = n(n+1)/2`` channels per node.  The inner product between two
fields is the quadrature of the Frobenius product::

    <<A, B>> = sum_x w(x) tr(A(x)^T B(x))

which in ``sym_vec`` coordinates weights off-diagonal channels by 2.
"""

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg as sla
from scipy import special

from . import matalg
from .errors import (DimensionError, DivisionGuardError, InsufficientDataError,
                     InvalidInputError, TruncationOverflowError)

RANK_TOL = 1e-12
GUARD_TOL = 1e-12


class RealizationSet:
    """Realizations of a symmetric-matrix field on common nodes.

    Parameters
    ----------
    values : array_like, shape (count, n_nodes, n_w)
        ``sym_vec`` coordinates per node.
    n : int, optional
        Matrix dimension; inferred from ``n_w``.
    """

    def __init__(self, values, n=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise DimensionError("values must have shape (count, n_nodes, n_w)")
        n_w = values.shape[2]
        self.n = matalg.dim_from_nsym(n_w) if n is None else int(n)
        if matalg.n_sym(self.n) != n_w:
            raise DimensionError(f"n_w={n_w} does not match n={self.n}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("non-finite realization values")
        self.values = values

    @classmethod
    def from_matrices(cls, mats):
        """Build from an array of shape (count, n_nodes, n, n)."""
        mats = np.asarray(mats, dtype=np.float64)
        return cls(matalg.sym_vec(mats), mats.shape[-1])

    def matrices(self):
        return matalg.vec_sym(self.values, self.n)

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    @property
    def n_w(self):
        return self.values.shape[2]


class CovarianceKernel:
    """Discrete covariance ``C[(a, k), (b, l)]`` of a field on nodes.

    Holds the centered samples so that large kernels need not be formed;
    :attr:`matrix` materializes the dense ``(n_nodes*n_w)^2`` array.
    """

    def __init__(self, n_nodes, n_w, centered=None, matrix=None):
        self.n_nodes = n_nodes
        self.n_w = n_w
        self.centered = centered
        self._matrix = matrix
        if centered is None and matrix is None:
            raise InvalidInputError("covariance needs samples or a matrix")

    @classmethod
    def from_matrix(cls, matrix, n_w):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] % n_w:
            raise DimensionError("covariance matrix shape is inconsistent with n_w")
        return cls(matrix.shape[0] // n_w, n_w, matrix=0.5 * (matrix + matrix.T))

    @property
    def size(self):
        return self.n_nodes * self.n_w

    @property
    def matrix(self):
        if self._matrix is None:
            x = self.centered
            self._matrix = (x.T @ x) / (x.shape[0] - 1)
        return self._matrix

    def block(self, a, b):
        """The ``n_w x n_w`` block between nodes ``a`` and ``b``."""
        w = self.n_w
        return self.matrix[a * w:(a + 1) * w, b * w:(b + 1) * w]


def estimate_moments(realizations):
    """Unbiased sample mean and covariance of a realization set.

    Returns
    -------
    mean : ndarray, shape (n_nodes, n_w)
    cov : CovarianceKernel

    Raises
    ------
    InsufficientDataError
        With fewer than two realizations.
    """
    if realizations.count < 2:
        raise InsufficientDataError("need at least two realizations for a covariance")
    vals = realizations.values
    mean = vals.mean(axis=0)
    centered = (vals - mean).reshape(realizations.count, -1)
    return mean, CovarianceKernel(realizations.n_nodes, realizations.n_w, centered=centered)


@dataclass
class KLBasis:
    """Truncated Karhunen-Loeve basis.

    Attributes
    ----------
    mean : ndarray, shape (n_nodes, n_w)
    sigma : ndarray, shape (m,)
        Eigenvalues, descending and positive.
    modes : ndarray, shape (m, n_nodes, n_w)
        Eigenfields, orthonormal for the field inner product.
    weights : ndarray, shape (n_nodes,)
        Node quadrature weights.
    n : int
        Matrix dimension.
    mesh_digest : bytes
        Identifies the mesh the basis was computed on.
    """

    mean: np.ndarray
    sigma: np.ndarray
    modes: np.ndarray
    weights: np.ndarray
    n: int
    mesh_digest: bytes = b""
    spectrum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.modes = np.asarray(self.modes, dtype=np.float64).reshape(
            (len(self.sigma),) + np.shape(self.mean))

    @property
    def m(self):
        return len(self.sigma)

    @property
    def n_nodes(self):
        return self.mean.shape[0]

    @property
    def n_w(self):
        return self.mean.shape[1]

    @property
    def channel_weights(self):
        return matalg.frobenius_weights(self.n)

    def inner(self, a, b):
        """Field inner product over the trailing (n_nodes, n_w) axes."""
        wts = self.weights[:, None] * self.channel_weights[None, :]
        return np.sum(np.asarray(a) * np.asarray(b) * wts, axis=(-2, -1))

    def gram(self):
        flat = self.modes.reshape(self.m, -1)
        wts = (self.weights[:, None] * self.channel_weights[None, :]).ravel()
        return (flat * wts) @ flat.T

    def pointwise_norm(self, g):
        """Frobenius norm of each node value, ``g`` of shape (..., n_nodes, n_w)."""
        return np.sqrt(np.sum(np.asarray(g) ** 2 * self.channel_weights, axis=-1))

    @cached_property
    def mode_sup_norms(self):
        """``max_x ||G_i(x)||_F`` per mode."""
        if self.m == 0:
            return np.zeros(0)
        return self.pointwise_norm(self.modes).max(axis=1)

    @cached_property
    def mean_sup_norm(self):
        return float(self.pointwise_norm(self.mean).max())

    def truncate(self, m):
        if m > self.m:
            raise TruncationOverflowError(f"basis has only {self.m} modes", self.m)
        return KLBasis(self.mean, self.sigma[:m], self.modes[:m], self.weights,
                       self.n, self.mesh_digest, self.spectrum)

    def realize(self, eta):
        """``G0 + sum_i sqrt(sigma_i) G_i eta_i`` for ``eta`` of shape (..., m)."""
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape[-1] != self.m:
            raise DimensionError(f"eta has {eta.shape[-1]} components, basis has {self.m}")
        scaled = self.modes * np.sqrt(self.sigma)[:, None, None]
        return self.mean + np.tensordot(eta, scaled, axes=([-1], [0]))

    def restrict(self, mat, weights=None):
        """Map every field through a linear node operator (e.g. interpolation
        to element centroids).  The result shares eigenvalues."""
        mat = np.asarray(mat)
        mean = mat @ self.mean
        modes = np.einsum("pa,iak->ipk", mat, self.modes)
        if weights is None:
            weights = np.full(mat.shape[0], np.nan)
        return KLBasis(mean, self.sigma, modes, weights, self.n, self.mesh_digest)


def solve_kl(cov, weights, m, mean=None, n=None, mesh_digest=b""):
    """Discrete KL eigenproblem by the Nystrom method.

    Solves ``S phi = sigma phi`` with ``S = W^(1/2) C W^(1/2)`` where ``W``
    combines node quadrature weights with Frobenius channel weights, and
    returns ``G_i = W^(-1/2) phi_i`` so that ``<<G_i, G_j>> = delta_ij``.

    Parameters
    ----------
    cov : CovarianceKernel
    weights : array_like, shape (n_nodes,)
    m : int
        Number of modes.
    mean : ndarray, optional
        Mean field; zeros by default.

    Raises
    ------
    TruncationOverflowError
        If ``m`` exceeds the numerical rank (eigenvalues above
        ``1e-12 * sigma_1``).
    """
    n_w = cov.n_w
    n = matalg.dim_from_nsym(n_w) if n is None else n
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (cov.n_nodes,) or np.any(weights <= 0):
        raise InvalidInputError("node weights must be positive, one per node")
    wdiag = (weights[:, None] * matalg.frobenius_weights(n)[None, :]).ravel()
    sw = np.sqrt(wdiag)
    if mean is None:
        mean = np.zeros((cov.n_nodes, n_w))
    if cov._matrix is None and cov.centered.shape[0] - 1 < cov.size:
        y = cov.centered * sw / math.sqrt(cov.centered.shape[0] - 1)
        _, sv, vt = np.linalg.svd(y, full_matrices=False)
        evals = sv ** 2
        evecs = vt.T
    else:
        s = cov.matrix * sw[:, None] * sw[None, :]
        evals, evecs = sla.eigh(0.5 * (s + s.T))
        evals = evals[::-1]
        evecs = evecs[:, ::-1]
    top = evals[0] if len(evals) else 0.0
    rank = int(np.sum(evals > RANK_TOL * top)) if top > 0 else 0
    if m > rank:
        raise TruncationOverflowError(
            f"requested m={m} but the covariance has numerical rank {rank}", rank)
    phi = evecs[:, :m]
    # deterministic sign: largest-magnitude entry positive
    piv = np.argmax(np.abs(phi), axis=0)
    phi = phi * np.sign(phi[piv, np.arange(m)])
    modes = (phi / sw[:, None]).T.reshape(m, cov.n_nodes, n_w)
    return KLBasis(np.array(mean, dtype=np.float64), evals[:m].copy(), modes, weights,
                   n, mesh_digest, spectrum=evals[:rank].copy())


def kl_residuals(cov, basis):
    """Eigen-residuals ``||C W G_i - sigma_i G_i||_W`` per mode."""
    wdiag = (basis.weights[:, None] * basis.channel_weights[None, :]).ravel()
    flat = basis.modes.reshape(basis.m, -1)
    applied = (cov.matrix @ (flat * wdiag).T).T
    res = applied - basis.sigma[:, None] * flat
    return np.sqrt(np.sum(res ** 2 * wdiag, axis=1))


def project_eta(realizations, basis):
    """Coordinates ``eta_i = <<G - G0, G_i>> / sqrt(sigma_i)`` per realization.

    Raises
    ------
    DivisionGuardError
        If some ``sigma_i < 1e-12 sigma_1``.
    """
    if basis.m == 0:
        return np.zeros((realizations.count, 0))
    if np.any(basis.sigma < GUARD_TOL * basis.sigma[0]) or basis.sigma[0] <= 0:
        raise DivisionGuardError("eigenvalue too small to project on")
    centered = realizations.values - basis.mean
    wts = basis.weights[:, None] * basis.channel_weights[None, :]
    flat = (centered * wts).reshape(realizations.count, -1)
    return (flat @ basis.modes.reshape(basis.m, -1).T) / np.sqrt(basis.sigma)


# --- polynomial chaos -------------------------------------------------------

def hermite_1d(x, degree):
    """Normalized probabilists' Hermite polynomials ``He_k / sqrt(k!)``.

    Returns an array of shape ``x.shape + (degree + 1,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = x
    for k in range(1, degree):
        out[..., k + 1] = (x * out[..., k] - math.sqrt(k) * out[..., k - 1]) / math.sqrt(k + 1)
    return out


def legendre_1d(x, degree):
    """Legendre polynomials normalized for the uniform law on [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = x
    for k in range(1, degree):
        out[..., k + 1] = ((2 * k + 1) * x * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out * np.sqrt(2 * np.arange(degree + 1) + 1.0)


def graded_indices(dim, degree, include_constant=False):
    """Multi-indices of total degree ``<= degree`` in graded order.

    Within one degree the order is descending lexicographic, so that degree
    one comes out as ``e_1, e_2, ...``.
    """
    out = []
    for d in range(0 if include_constant else 1, degree + 1):
        block = [c for c in itertools.product(range(d, -1, -1), repeat=dim) if sum(c) == d]
        out.extend(block)
    return np.array(out, dtype=np.int64).reshape(len(out), dim)


class ChaosBasis:
    """Normalized multivariate orthogonal polynomials of a germ.

    Parameters
    ----------
    n_germ : int
        Germ dimension.
    degree : int
        Maximal total degree.
    n_terms : int, optional
        Keep only the first ``n_terms`` functions in graded order.
    include_constant : bool
        Whether the constant function is part of the basis.
    family : {'hermite', 'legendre'}
        Gaussian or uniform-on-[-1,1] germ.
    scale : float
        Germ coordinates are divided by ``scale`` before evaluation, for a
        germ with law N(0, scale^2) (or uniform on [-scale, scale]).
    """

    def __init__(self, n_germ, degree, n_terms=None, include_constant=False,
                 family="hermite", scale=1.0):
        if n_germ < 0 or degree < 0:
            raise InvalidInputError("germ dimension and degree must be non-negative")
        if family not in ("hermite", "legendre"):
            raise InvalidInputError(f"unknown polynomial family {family!r}")
        self.n_germ = int(n_germ)
        self.degree = int(degree)
        self.include_constant = bool(include_constant)
        self.family = family
        self.scale = float(scale)
        idx = graded_indices(self.n_germ, self.degree, include_constant)
        if n_terms is not None:
            if n_terms > len(idx):
                raise DimensionError(
                    f"only {len(idx)} functions of degree <= {degree} in {n_germ} variables")
            idx = idx[:n_terms]
        self.indices = idx

    @property
    def size(self):
        return len(self.indices)

    def __len__(self):
        return self.size

    def evaluate(self, xi):
        """Basis values, shape ``xi.shape[:-1] + (size,)``."""
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != self.n_germ:
            raise DimensionError(f"germ has {xi.shape[-1]} coordinates, expected {self.n_germ}")
        u = xi / self.scale
        poly = hermite_1d if self.family == "hermite" else legendre_1d
        tables = poly(u, self.degree)                  # (..., n_germ, degree+1)
        out = np.ones(xi.shape[:-1] + (self.size,))
        for k in range(self.n_germ):
            out *= tables[..., k, :][..., self.indices[:, k]]
        return out

    def descriptor(self):
        return {"n_germ": self.n_germ, "degree": self.degree, "n_terms": self.size,
                "include_constant": self.include_constant, "family": self.family,
                "scale": self.scale}


def eta_from_xi(y, basis, xi):
    """``eta = y^T Psi(xi)`` for ``xi`` of shape (..., n_germ)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != basis.size:
        raise DimensionError(f"y has {y.shape[0]} rows, basis has {basis.size} functions")
    return basis.evaluate(xi) @ y


def sample_G(basis_kl, y, chaos, xi):
    """Realizations ``G0 + sum_i sqrt(sigma_i) G_i eta_i(xi)``."""
    if basis_kl.m == 0:
        xi = np.asarray(xi)
        return np.broadcast_to(basis_kl.mean, xi.shape[:-1] + basis_kl.mean.shape).copy()
    return basis_kl.realize(eta_from_xi(y, chaos, xi))


def identity_coeffs(n_terms, m):
    """The coefficient matrix with ``y_ji = delta_ij``."""
    y = np.zeros((n_terms, m))
    y[np.arange(m), np.arange(m)] = 1.0
    return y


def check_coeffs(y, tol=1e-10):
    """Return ``||y^T y - I||_F`` and raise if it exceeds ``tol``."""
    y = np.asarray(y)
    gap = float(np.linalg.norm(y.T @ y - np.eye(y.shape[1])))
    if gap > tol:
        raise InvalidInputError(f"chaos coefficients are not orthonormal (gap {gap:.3e})")
    return gap


# --- quadrature and test covariances ----------------------------------------

def tensor_gauss_hermite(dim, npts):
    """Tensor Gauss-Hermite rule for N(0, I_dim) with weights summing to one."""
    x, w = np.polynomial.hermite_e.hermegauss(npts)
    w = w / w.sum()
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    pts = np.array(list(itertools.product(x, repeat=dim)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return pts, wts


def tensor_gauss_legendre(dim, npts):
    """Tensor Gauss-Legendre rule for the uniform law on [-1, 1]^dim."""
    x, w = np.polynomial.legendre.leggauss(npts)
    w = w / w.sum()
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    pts = np.array(list(itertools.product(x, repeat=dim)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return pts, wts


def _distances(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def exponential_covariance(x, corr_length, variance=1.0):
    """``variance * exp(-|x - x'| / corr_length)`` on a point set."""
    return variance * np.exp(-_distances(x) / corr_length)


def matern_correlation(r, corr_length, smoothness):
    """Matern correlation ``2^(1-nu)/Gamma(nu) (sqrt(2 nu) r/l)^nu K_nu(...)``."""
    r = np.asarray(r, dtype=np.float64)
    nu = float(smoothness)
    arg = np.sqrt(2.0 * nu) * r / corr_length
    out = np.ones_like(arg)
    pos = arg > 0
    a = arg[pos]
    out[pos] = (2.0 ** (1.0 - nu) / special.gamma(nu)) * a ** nu * special.kv(nu, a)
    return np.clip(out, 0.0, 1.0)


def matern_covariance(x, corr_length, smoothness, variance=1.0):
    return variance * matern_correlation(_distances(x), corr_length, smoothness)
