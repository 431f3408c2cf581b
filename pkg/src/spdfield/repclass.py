"""Lower-bounded positive-definite matrix fields.

A field ``K`` is built from a positive-definite ``K0`` and a deterministic
lower field ``Kl = Ll^T Ll`` (upper Cholesky ``Ll``) as::

    K = Ll^T (eps I + K0) Ll / (1 + eps)

so that ``lambda_min(K) >= k0 eps / (1 + eps)`` whatever ``K0`` is.  ``K0``
comes from a symmetric germ ``G`` either as ``exp(G)`` (exponential kind)
or as ``L^T L`` with ``L`` upper triangular, off-diagonal entries copied
from ``G`` and diagonal entries ``sqrt(h(G_jj; a_j))`` (square kind).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import kernels, matalg
from .errors import (DimensionError, IndefiniteResultError, InvalidInputError,
                     NotPositiveDefiniteError, SaturationError)

DEFAULT_EPS = 1e-2
GAMMA_TOL = 1e-12
APM_GROWTH = 1.25
APM_RANGE = 37.0


# --- the APM squash ---------------------------------------------------------

def regularized_gamma(a, x):
    """Regularized incomplete gamma ``(P(a, x), Q(a, x))``."""
    return kernels.gammainc(a, x)


def gamma_quantile(a, u, upper=False):
    """Solve ``P(a, x) = u`` for ``x`` (``Q(a, x) = u`` if ``upper``)."""
    return kernels.gammaincinv(a, u, upper, GAMMA_TOL)


def h_apm(g, a, s):
    """Squash ``2 s^2 F_Gamma(a)^-1(Phi(g / s))``.

    ``Phi`` is the standard normal CDF and ``F_Gamma(a)`` the CDF of the
    Gamma law with shape ``a`` and unit scale.  Positive arguments are
    inverted through the upper tails so that the usable range extends to
    ``|g / s| = 37``.

    Raises
    ------
    SaturationError
        When the normal tail underflows or the gamma inversion fails.
    """
    g, a = np.broadcast_arrays(np.asarray(g, dtype=np.float64),
                               np.asarray(a, dtype=np.float64))
    w = g / s
    if np.any(np.abs(w) > APM_RANGE) or not np.all(np.isfinite(w)):
        raise SaturationError(
            f"|g/s| = {float(np.nanmax(np.abs(w))):.3g} exceeds {APM_RANGE}: the normal "
            "CDF is numerically 0 or 1 there and h_apm cannot be inverted")
    pos = w > 0
    tail = special.ndtr(np.where(pos, -w, w))
    if np.any(tail <= 0.0):
        raise SaturationError("normal CDF saturated; h_apm cannot be inverted there")
    x = np.empty(w.shape)
    if np.any(pos):
        x[pos] = gamma_quantile(a[pos], tail[pos], upper=True)
    if np.any(~pos):
        x[~pos] = gamma_quantile(a[~pos], tail[~pos], upper=False)
    if not np.all(np.isfinite(x)) or np.any(x <= 0.0):
        raise SaturationError("gamma quantile outside floating-point range")
    return 2.0 * s * s * x


def h_apm_inv(v, a, s):
    """Inverse of :func:`h_apm` in its first argument."""
    v, a = np.broadcast_arrays(np.asarray(v, dtype=np.float64),
                               np.asarray(a, dtype=np.float64))
    if np.any(v <= 0.0):
        raise InvalidInputError("h_apm_inv needs positive arguments")
    p, q = regularized_gamma(a, v / (2.0 * s * s))
    low = p <= 0.5
    tail = np.where(low, p, q)
    if np.any(tail <= 0.0):
        raise SaturationError("gamma CDF saturated; value outside the invertible range")
    w = special.ndtri(tail)
    return s * np.where(low, w, -w)


class SquashFunction:
    """Increasing map of the real line onto the positive reals.

    Use :meth:`apm` or :meth:`softabs` to construct one.  ``a`` holds one
    parameter per diagonal index.  The growth certificate
    ``h(g; a_j) <= c_a[j] + c_h g^2`` is stored in ``c_a`` and ``c_h``.
    """

    def __init__(self, kind, a, s=None, dispersion=None, c_a=None, c_h=None):
        self.kind = kind
        self.a = np.asarray(a, dtype=np.float64)
        self.s = s
        self.dispersion = dispersion
        self.c_a = None if c_a is None else np.asarray(c_a, dtype=np.float64)
        self.c_h = c_h
        self.certified_range = None

    @property
    def n(self):
        return len(self.a)

    @classmethod
    def softabs(cls, a):
        """``h(g; a) = a (g + sqrt(g^2 + 1))``, certified by ``c_a = 2a``,
        ``c_h = max a``."""
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        if np.any(a <= 0):
            raise InvalidInputError("softabs parameters must be positive")
        return cls("softabs", a, c_a=2.0 * a, c_h=float(a.max()))

    @classmethod
    def apm(cls, n, dispersion, grid_points=4001):
        """Squash of the algebraic prior model with dispersion ``delta``.

        ``s = delta / sqrt(n + 1)`` and ``a_j = 1/(2 s^2) + (1 - j)/2``.
        The growth constants are certified numerically (see
        :meth:`certify`).
        """
        limit = math.inf if n == 1 else math.sqrt((n + 1) / (n - 1))
        if not 0.0 < dispersion < limit:
            raise InvalidInputError(
                f"dispersion must lie in (0, {limit:.6g}) for n={n}, got {dispersion}")
        s = dispersion / math.sqrt(n + 1)
        j = np.arange(1, n + 1)
        a = 1.0 / (2.0 * s * s) + (1.0 - j) / 2.0
        out = cls("apm", a, s=s, dispersion=dispersion)
        out.certify(grid_points)
        return out

    def h(self, g, j=None):
        """Evaluate ``h(g; a_j)``.  ``j`` (zero-based) selects the
        parameter; by default the last axis of ``g`` runs over ``j``."""
        a = self.a if j is None else self.a[j]
        if self.kind == "softabs":
            g = np.asarray(g, dtype=np.float64)
            root = np.sqrt(g * g + 1.0)
            # the reciprocal form avoids cancellation for negative g
            return a * np.where(g >= 0, g + root, 1.0 / (root - g))
        return h_apm(g, a, self.s)

    def h_inv(self, v, j=None):
        a = self.a if j is None else self.a[j]
        if self.kind == "softabs":
            v = np.asarray(v, dtype=np.float64)
            if np.any(v <= 0.0):
                raise InvalidInputError("softabs inverse needs positive arguments")
            r = v / a
            return 0.5 * (r - 1.0 / r)
        return h_apm_inv(v, a, self.s)

    def certify(self, grid_points=4001, c_h=APM_GROWTH):
        """Certify ``h(g) <= c_a + c_h g^2`` for the APM squash.

        On ``g <= 0`` monotonicity gives ``h(g) <= h(0)``.  On a grid
        ``0 = g_0 < ... < g_K = g_max`` with ``g_max`` at the saturation
        limit, ``h(g) <= h(g_{k+1})`` and ``c_h g^2 >= c_h g_k^2`` on each
        cell, so ``c_a = max_k (h(g_{k+1}) - c_h g_k^2)`` is a rigorous
        constant on the whole usable range.  Arguments beyond ``g_max``
        raise :class:`SaturationError`.
        """
        g_max = APM_RANGE * self.s
        grid = np.linspace(0.0, g_max, grid_points)
        vals = self.h(np.repeat(grid[:, None], self.n, axis=1))
        if np.any(np.diff(vals, axis=0) <= 0):
            raise InvalidInputError("squash is not strictly increasing on the grid")
        excess = vals[1:] - c_h * grid[:-1, None] ** 2
        self.c_a = np.maximum(excess.max(axis=0), vals[0])
        self.c_h = float(c_h)
        self.certified_range = (-math.inf, float(g_max))
        return self.c_a, self.c_h

    @property
    def gamma0(self):
        return float(np.sum(self.c_a))

    @property
    def gamma1(self):
        return max(float(self.c_h), 0.5)

    def describe(self):
        out = {"kind": self.kind, "a": self.a.tolist(), "c_a": self.c_a.tolist(),
               "c_h": self.c_h}
        if self.kind == "apm":
            out.update(s=self.s, dispersion=self.dispersion)
        return out


# --- representations --------------------------------------------------------

@dataclass(frozen=True)
class Representation:
    """Map from a symmetric germ ``G`` to a positive-definite ``K0``.

    ``kind`` is ``'exponential'`` or ``'square'``; the square kind carries a
    :class:`SquashFunction` whose dimension must match ``n``.
    """

    kind: str
    squash: SquashFunction = field(default=None, compare=False)

    @classmethod
    def exponential(cls):
        return cls("exponential")

    @classmethod
    def square(cls, squash):
        return cls("square", squash)

    def __post_init__(self):
        if self.kind not in ("exponential", "square"):
            raise InvalidInputError(f"unknown representation kind {self.kind!r}")
        if self.kind == "square" and self.squash is None:
            raise InvalidInputError("square representation needs a squash function")

    def _check_n(self, n):
        if self.kind == "square" and self.squash.n != n:
            raise DimensionError(f"squash is set up for n={self.squash.n}, got n={n}")

    def forward(self, g):
        """``K0`` from ``G`` (stacks of shape (..., n, n))."""
        g = matalg.symmetrize(g, "G")
        n = g.shape[-1]
        if self.kind == "exponential":
            return matalg.sym_exp(g)
        self._check_n(n)
        lower = np.triu(g, 1)
        diag = np.sqrt(self.squash.h(np.diagonal(g, axis1=-2, axis2=-1)))
        idx = np.arange(n)
        lower[..., idx, idx] = diag
        k0 = np.swapaxes(lower, -1, -2) @ lower
        return 0.5 * (k0 + np.swapaxes(k0, -1, -2))

    def inverse(self, k0):
        """``G`` from ``K0``; the inverse of :meth:`forward`.

        Raises
        ------
        NotPositiveDefiniteError
            If ``K0`` is not positive definite.
        """
        if self.kind == "exponential":
            return matalg.sym_log(k0)
        n = np.shape(k0)[-1]
        self._check_n(n)
        u = matalg.chol_upper(k0)
        idx = np.arange(n)
        diag = u[..., idx, idx]
        g = np.triu(u, 1)
        g = g + np.swapaxes(g, -1, -2)
        g[..., idx, idx] = self.squash.h_inv(diag * diag)
        return g


def rep_forward(kind, g):
    return kind.forward(g)


def rep_inverse(kind, k0):
    return kind.inverse(k0)


# --- normalization ----------------------------------------------------------

class NormalizationField:
    """Deterministic lower field ``Kl`` at a set of points.

    Parameters
    ----------
    k_lower : array_like, shape (n_points, n, n)
        Positive-definite matrices.
    eps : float
        Shift parameter.
    k0, k1_tilde : float, optional
        Constants with ``k0 |v|^2 <= v^T Kl v <= k1_tilde/sqrt(n) |v|^2``.
        Defaults are the tightest values on the points.
    """

    def __init__(self, k_lower, eps=DEFAULT_EPS, k0=None, k1_tilde=None):
        k_lower = matalg.symmetrize(np.asarray(k_lower, dtype=np.float64), "Kl")
        if k_lower.ndim == 2:
            k_lower = k_lower[None]
        if eps <= 0:
            raise InvalidInputError("eps must be positive")
        self.k_lower = k_lower
        self.eps = float(eps)
        self.L = matalg.chol_upper(k_lower)
        self.L_inv = np.triu(np.linalg.inv(self.L))
        lam = matalg.eigvalsh(k_lower)
        k0_auto = float(lam[:, 0].min())
        k1t_auto = math.sqrt(self.n) * float(lam[:, -1].max())
        if k0 is None:
            k0 = k0_auto
        elif k0 > k0_auto * (1 + 1e-12):
            raise InvalidInputError(f"k0={k0} exceeds the smallest eigenvalue {k0_auto}")
        if k1_tilde is None:
            k1_tilde = k1t_auto
        elif k1_tilde < k1t_auto * (1 - 1e-12):
            raise InvalidInputError(f"k1_tilde={k1_tilde} is below sqrt(n) lambda_max")
        if not 0 < k0 <= k1_tilde:
            raise InvalidInputError("need 0 < k0 <= k1_tilde")
        self.k0 = float(k0)
        self.k1_tilde = float(k1_tilde)

    @classmethod
    def constant(cls, matrix, n_points, eps=DEFAULT_EPS):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(np.broadcast_to(matrix, (n_points,) + matrix.shape).copy(), eps)

    @property
    def n(self):
        return self.k_lower.shape[-1]

    @property
    def n_points(self):
        return self.k_lower.shape[0]

    @property
    def k1(self):
        return self.n * self.k1_tilde

    @property
    def k_eps(self):
        return self.k0 * self.eps / (1.0 + self.eps)

    def restrict(self, mat):
        """Lower field at new points as convex combinations of the old ones.

        Rows of ``mat`` must be non-negative and sum to one, which keeps the
        parent constants valid (the smallest eigenvalue is concave and the
        largest convex on symmetric matrices).
        """
        mat = np.asarray(mat, dtype=np.float64)
        if np.any(mat < -1e-14) or np.abs(mat.sum(axis=1) - 1).max() > 1e-12:
            raise InvalidInputError("restriction rows must be convex weights")
        kl = np.einsum("pa,aij->pij", mat, self.k_lower)
        return NormalizationField(kl, self.eps, self.k0, self.k1_tilde)


def _select(norm, x):
    if x is None:
        return norm.L, norm.L_inv
    return norm.L[x], norm.L_inv[x]


def normalize_K(norm, k0, x=None):
    """``K = Ll^T (eps I + K0) Ll / (1 + eps)``.

    ``k0`` has shape (..., n_points, n, n) when ``x`` is None, otherwise
    ``x`` indexes the points used (broadcast against the leading axes).
    """
    L, _ = _select(norm, x)
    k0 = np.asarray(k0, dtype=np.float64)
    inner = k0 + norm.eps * np.eye(norm.n)
    k = np.swapaxes(L, -1, -2) @ inner @ L / (1.0 + norm.eps)
    return 0.5 * (k + np.swapaxes(k, -1, -2))


def denormalize_K0(norm, k, x=None):
    """``K0 = (1 + eps) Ll^-T K Ll^-1 - eps I``.

    Raises
    ------
    IndefiniteResultError
        If ``K0`` is not positive definite, i.e. ``K`` violates the lower
        bound carried by ``norm``.  ``index`` gives the flat position.
    """
    _, Li = _select(norm, x)
    k = np.asarray(k, dtype=np.float64)
    k0 = (1.0 + norm.eps) * np.swapaxes(Li, -1, -2) @ k @ Li - norm.eps * np.eye(norm.n)
    k0 = 0.5 * (k0 + np.swapaxes(k0, -1, -2))
    ok = matalg.is_spd(k0)
    if not np.all(ok):
        bad = np.unravel_index(int(np.flatnonzero(~ok.ravel())[0]), ok.shape)
        raise IndefiniteResultError(
            f"denormalized matrix is not positive definite at index {bad}; the field "
            f"is incompatible with the lower bound k_eps={norm.k_eps:.4g}",
            index=bad[-1] if bad else None)
    return k0


# --- bounds -----------------------------------------------------------------

@dataclass
class BoundReport:
    """Bound functionals for one or more realizations.

    ``delta`` and ``gamma`` follow the sup-norm construction; ``beta`` uses
    the realized ``max_x ||G(x)||_F`` instead of ``delta`` and is never
    larger than ``gamma``.  ``gamma_bar`` is only set for the square kind.
    """

    k_eps: float
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    zeta_bar: float
    gamma_bar: float = None
    gamma0: float = None
    gamma1: float = None


def _growth(kind, norm, t, quadratic):
    n = norm.n
    scale = norm.k1 / (1.0 + norm.eps)
    if kind.kind == "exponential":
        return scale * math.sqrt(n) * (norm.eps + np.exp(t))
    sq = kind.squash
    return scale * (math.sqrt(n) * norm.eps + sq.gamma0 + sq.gamma1 * (t if quadratic else t * t))


def bounds(kind, norm, kl, eta, g_sup=None):
    """Evaluate the bound functionals.

    Parameters
    ----------
    kind : Representation
    norm : NormalizationField
    kl : KLBasis
        Provides ``||G0||_inf``, ``||G_i||_inf`` and ``sigma``.
    eta : array_like, shape (..., m)
        Chaos coordinates of the realizations.
    g_sup : array_like, optional
        Realized ``max_x ||G(x)||_F``; defaults to ``delta``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    weights = np.sqrt(kl.sigma) * kl.mode_sup_norms
    if kl.m:
        delta = kl.mean_sup_norm + np.abs(eta) @ weights
    else:
        delta = np.full(eta.shape[:-1], kl.mean_sup_norm)
    gamma = _growth(kind, norm, delta, quadratic=False)
    beta_g = delta if g_sup is None else np.asarray(g_sup, dtype=np.float64)
    beta = _growth(kind, norm, beta_g, quadratic=False)
    zeta = 2.0 * kl.mean_sup_norm ** 2 + 2.0 * float(weights.sum()) ** 2
    rep = BoundReport(norm.k_eps, beta, delta, gamma, zeta)
    if kind.kind == "square":
        rep.gamma_bar = float(_growth(kind, norm, zeta, quadratic=True))
        rep.gamma0 = kind.squash.gamma0
        rep.gamma1 = kind.squash.gamma1
    return rep


def bound_chain(kind, norm, g, k0, k, x=None):
    """Left/right sides of the pointwise inequalities of the class.

    Returns a dict mapping a label to ``(lhs, rhs)`` arrays with the same
    leading shape as ``g``:

    ``lower``      ``k_eps <= lambda_min(K)``
    ``frob_K``     ``||K||_F <= k1 (sqrt(n) eps + ||K0||_F) / (1 + eps)``
    ``frob_Kinv``  ``||K^-1||_F <= sqrt(n) (1 + eps) / eps tr(Kl^-1)``
    ``frob_K0``    exponential: ``||K0||_F <= sqrt(n) exp(||G||_F)``;
                   square: ``||K0||_F <= gamma0 + gamma1 ||G||_F^2``
    """
    n = norm.n
    kl = norm.k_lower if x is None else norm.k_lower[x]
    k0n = np.linalg.norm(k0, axis=(-2, -1))
    gn = np.linalg.norm(g, axis=(-2, -1))
    out = {
        "lower": (np.full(k.shape[:-2], norm.k_eps), matalg.eigvalsh(k)[..., 0]),
        "frob_K": (np.linalg.norm(k, axis=(-2, -1)),
                   norm.k1 / (1 + norm.eps) * (math.sqrt(n) * norm.eps + k0n)),
        "frob_Kinv": (np.linalg.norm(np.linalg.inv(k), axis=(-2, -1)),
                      math.sqrt(n) * (1 + norm.eps) / norm.eps
                      * np.broadcast_to(np.trace(np.linalg.inv(kl), axis1=-2, axis2=-1),
                                        k.shape[:-2])),
    }
    if kind.kind == "exponential":
        out["frob_K0"] = (k0n, math.sqrt(n) * np.exp(gn))
    else:
        out["frob_K0"] = (k0n, kind.squash.gamma0 + kind.squash.gamma1 * gn * gn)
    return out


__all__ = [
    "BoundReport", "NormalizationField", "Representation", "SquashFunction",
    "bound_chain", "bounds", "denormalize_K0", "gamma_quantile", "h_apm", "h_apm_inv",
    "normalize_K", "regularized_gamma", "rep_forward", "rep_inverse",
    "NotPositiveDefiniteError",
]
