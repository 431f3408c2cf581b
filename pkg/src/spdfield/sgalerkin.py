"""Finite element solves of ``-div(K grad u) = f`` and the stochastic
Galerkin approximation of the parameter-to-solution map.

The spatial discretization is P1 on a :class:`~spdfield.mesh.Mesh` with
homogeneous Dirichlet conditions; coefficients are constant per element.
The parametric space is a product of orthonormal polynomial chaos in the
germ ``y`` and in the Stiefel parameters ``z``.  The expectation over
``(y, z)`` is a fixed quadrature, so every bilinear form below is the
quadrature-discretized one.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels, klpce, matalg
from .errors import (AssemblyError, ConvergenceError, DimensionError,
                     InvalidInputError, InvariantViolation)
from .klpce import ChaosBasis
from .repclass import bounds, normalize_K
from .stiefel import StiefelChart

CG_TOL = 1e-10
TENSOR_MAX_DIM = 8
TENSOR_MAX_POINTS = 20000
SPD_SLACK = 1e-10

_counter = {"galerkin": 0}


def galerkin_solve_count():
    """Number of stochastic Galerkin systems solved in this process."""
    return _counter["galerkin"]


# --- loads ------------------------------------------------------------------

@dataclass
class Load:
    """Right-hand side ``f`` as a functional on P1 functions.

    ``kind`` is ``'constant'`` (density ``value``), ``'nodal'`` (P1
    density with node values) or ``'point'`` (point loads ``value`` at
    ``points``).
    """

    kind: str = "constant"
    value: object = 1.0
    points: object = None

    def vector(self, mesh):
        """``b_i = f(phi_i)`` for every node (boundary rows included)."""
        if self.kind == "constant":
            return float(self.value) * mesh.node_weights
        if self.kind == "nodal":
            vals = np.asarray(self.value, dtype=np.float64)
            if vals.shape != (mesh.n_nodes,):
                raise DimensionError("nodal load needs one value per node")
            return mass_matrix(mesh) @ vals
        if self.kind == "point":
            mat = mesh.interpolation_matrix(self.points)
            return mat.T @ np.atleast_1d(np.asarray(self.value, dtype=np.float64))
        raise InvalidInputError(f"unknown load kind {self.kind!r}")

    def scaled(self, factor):
        val = self.value if self.kind == "constant" else np.asarray(self.value)
        return Load(self.kind, factor * val, self.points)


# --- deterministic FEM ------------------------------------------------------

def mass_matrix(mesh):
    """Consistent P1 mass matrix."""
    d = mesh.dim
    local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    vals = mesh.measures[:, None, None] * local
    return _scatter(mesh, vals)


def _scatter(mesh, local):
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


def _check_coefficient(mesh, coeff):
    c = np.asarray(coeff, dtype=np.float64)
    if c.ndim == 0:
        c = c * np.eye(mesh.dim)
    if c.shape == (mesh.dim, mesh.dim):
        c = np.broadcast_to(c, (mesh.n_elements, mesh.dim, mesh.dim))
    if c.shape[-3:] != (mesh.n_elements, mesh.dim, mesh.dim):
        raise DimensionError(
            f"coefficient must have shape (..., {mesh.n_elements}, {mesh.dim}, {mesh.dim})")
    return c


def local_stiffness(mesh, coeff):
    """Element matrices ``|e| grad_a . C_e grad_b``, shape (..., n_el, d+1, d+1)."""
    c = _check_coefficient(mesh, coeff)
    g = mesh.grads
    return mesh.measures[:, None, None] * np.einsum("ead,...edf,ebf->...eab", g, c, g)


def stiffness_matrix(mesh, coeff):
    """Global P1 stiffness (all nodes) for a per-element coefficient."""
    return _scatter(mesh, local_stiffness(mesh, coeff))


def laplacian(mesh):
    return stiffness_matrix(mesh, np.ones(()))


def _interior_block(mat, mesh):
    idx = mesh.interior
    return mat[idx][:, idx]


def _line_order(mesh):
    """Sorted node order and per-element positions for a 1D mesh."""
    order = np.argsort(mesh.nodes[:, 0], kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    pos = np.sort(rank[mesh.elements], axis=1)
    if np.any(pos[:, 1] - pos[:, 0] != 1):
        raise InvalidInputError("1D mesh elements must join neighbouring nodes")
    return order, pos[:, 0]


def solve_det_many(mesh, coeffs, rhs):
    """P1 solutions for a batch of per-element coefficients.

    Parameters
    ----------
    coeffs : ndarray, shape (q, n_el, d, d)
    rhs : ndarray, shape (n_nodes,) or (q, n_nodes)
        Load vectors ``f(phi_i)``.

    Returns
    -------
    ndarray, shape (q, n_nodes)
        Nodal values, zero on the Dirichlet boundary.
    """
    coeffs = _check_coefficient(mesh, coeffs)
    if coeffs.ndim == 3:
        coeffs = coeffs[None]
    count = coeffs.shape[0]
    rhs = np.broadcast_to(np.asarray(rhs, dtype=np.float64), (count, mesh.n_nodes))
    out = np.zeros((count, mesh.n_nodes))
    if mesh.dim == 1:
        order, left = _line_order(mesh)
        lengths = mesh.measures
        cond = coeffs[:, :, 0, 0] / lengths
        nn = mesh.n_nodes
        diag = np.zeros((count, nn))
        off = np.zeros((count, nn - 1))
        np.add.at(diag.T, left, cond.T)
        np.add.at(diag.T, left + 1, cond.T)
        off[:, left] = -cond
        free = ~mesh.boundary[order]
        keep = np.flatnonzero(free)
        if keep.size == 0:
            return out
        adjacent = np.diff(keep) == 1
        sub = np.where(adjacent, off[:, keep[:-1]], 0.0)
        x = kernels.thomas(sub, diag[:, keep], sub, rhs[:, order[keep]])
        out[:, order[keep]] = x
        return out
    idx = mesh.interior
    for q in range(count):
        mat = _interior_block(stiffness_matrix(mesh, coeffs[q]), mesh).tocsc()
        out[q, idx] = spla.splu(mat).solve(rhs[q, idx])
    return out


def solve_det(mesh, coeff, load):
    """P1 Galerkin solution for one coefficient field.

    Parameters
    ----------
    coeff : array_like
        Per-element matrices (n_el, d, d), one (d, d) matrix, or a scalar
        multiple of the identity.
    load : Load or ndarray
        Load functional or an assembled load vector.
    """
    b = load.vector(mesh) if isinstance(load, Load) else np.asarray(load, dtype=np.float64)
    c = _check_coefficient(mesh, coeff)
    lam = matalg.eigvalsh(c)
    if np.any(lam[..., 0] <= 0):
        raise InvariantViolation("coefficient is not positive definite on every element")
    return solve_det_many(mesh, c, b)[0]


def h1_seminorm(mesh, u):
    """``|u|_{H^1_0}`` of P1 nodal values (last axis)."""
    u = np.asarray(u, dtype=np.float64)
    flat = u.reshape(-1, mesh.n_nodes)
    energy = np.sum(flat * (laplacian(mesh) @ flat.T).T, axis=1)
    return np.sqrt(np.maximum(energy, 0.0)).reshape(u.shape[:-1])


def dual_norm(mesh, b):
    """Discrete ``H^-1`` norm ``sqrt(b^T S^-1 b)`` on the interior nodes."""
    idx = mesh.interior
    lap = _interior_block(laplacian(mesh), mesh).tocsc()
    bi = np.asarray(b, dtype=np.float64)[idx]
    return float(math.sqrt(bi @ spla.splu(lap).solve(bi)))


# --- parametric coefficients ------------------------------------------------

class FixedCoefficient:
    """Coefficient that does not depend on ``(y, z)``.

    Parameters
    ----------
    values : array_like, shape (n_el, d, d)
    n_germ, n_param : int
        Dimensions of the (ignored) parameters.
    """

    def __init__(self, values, n_germ=0, n_param=0):
        self.values = np.asarray(values, dtype=np.float64)
        lam = matalg.eigvalsh(self.values)
        self.alpha = float(lam[:, 0].min())
        self._upper = float(np.linalg.norm(self.values, axis=(-2, -1)).max())
        self.n_germ = n_germ
        self.n_param = n_param

    def sample(self, y, z):
        count = np.shape(y)[0]
        c = np.broadcast_to(self.values, (count,) + self.values.shape)
        return c, np.full(count, self._upper)


class FieldCoefficient:
    """``C(x, y, z)`` from a KL basis, chaos coefficients on the Stiefel
    manifold, a representation and a normalization.

    The germ field is evaluated at element centroids as the average of its
    node values, so ``C`` is constant per element.

    Parameters
    ----------
    mesh : Mesh
    kl : KLBasis
        Node-based KL data of the germ field.
    rep : Representation
    norm : NormalizationField
        Lower field at the mesh nodes.
    chaos : ChaosBasis
        Germ chaos with ``N`` functions.
    base : array_like, shape (N, m)
        Stiefel point ``[a]``.
    vary_z : bool
        If False the coefficient ignores ``z`` and ``n_param`` is 0.
    t : float
        Stiefel step scale.
    """

    def __init__(self, mesh, kl, rep, norm, chaos, base, vary_z=True, t=1.0):
        if kl.n != mesh.dim:
            raise DimensionError(f"the PDE needs n = d = {mesh.dim}, KL has n={kl.n}")
        if kl.n_nodes != mesh.n_nodes or norm.n_points != mesh.n_nodes:
            raise DimensionError("KL basis and normalization must live on the mesh nodes")
        self.mesh = mesh
        self.kl = kl
        self.rep = rep
        self.norm = norm
        self.chaos = chaos
        self.chart = StiefelChart(base, t)
        if self.chart.n_rows != chaos.size or self.chart.m != kl.m:
            raise DimensionError("base point must be N x m for the chaos and KL sizes")
        self.vary_z = vary_z
        avg = np.zeros((mesh.n_elements, mesh.n_nodes))
        np.put_along_axis(avg, mesh.elements, 1.0 / (mesh.dim + 1), axis=1)
        self.kl_c = kl.restrict(avg)
        self.norm_c = norm.restrict(avg)
        self.alpha = norm.k_eps
        self.n_germ = chaos.n_germ
        self.n_param = self.chart.nu if vary_z else 0

    def coeffs(self, z=None):
        """Chaos coefficient matrix ``[y] = M_[a](z)``."""
        if not self.vary_z or z is None:
            return np.array(self.chart.a)
        return self.chart(z)

    def eta(self, y, z):
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        psi = self.chaos.evaluate(y)
        if not self.vary_z:
            return psi @ self.chart.a
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        uniq, inv = np.unique(z, axis=0, return_inverse=True)
        inv = inv.ravel()
        eta = np.empty((len(y), self.kl.m))
        for k, zk in enumerate(uniq):
            sel = inv == k
            eta[sel] = psi[sel] @ self.chart(zk)
        return eta

    def sample(self, y, z):
        """Element coefficients (q, n_el, d, d) and the bound ``gamma`` (q,)."""
        eta = self.eta(y, z)
        g = matalg.vec_sym(self.kl_c.realize(eta), self.kl.n)
        k = normalize_K(self.norm_c, self.rep.forward(g))
        gam = bounds(self.rep, self.norm, self.kl, eta).gamma
        return k, gam


# --- quadrature and chaos spaces --------------------------------------------

@dataclass
class Quadrature:
    """Rule for ``E_Gamma`` on germ (``y``) and Stiefel (``z``) coordinates."""

    y: np.ndarray
    z: np.ndarray
    weights: np.ndarray
    kind: str = "tensor"

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidInputError("quadrature weights must be non-negative and sum to one")

    @property
    def size(self):
        return len(self.weights)


def make_quadrature(n_germ, n_param, points=4, z_scale=1.0, z_family="hermite",
                    mc_count=4000, rng=None, max_points=TENSOR_MAX_POINTS):
    """Tensor Gauss rule when ``n_germ + n_param <= 8`` and the point count
    stays below ``max_points``; Monte Carlo otherwise.

    ``z`` follows N(0, z_scale^2) per coordinate (``'hermite'``) or the
    uniform law on ``[-z_scale, z_scale]`` (``'legendre'``).
    """
    dim = n_germ + n_param
    if dim <= TENSOR_MAX_DIM and points ** dim <= max_points:
        py, wy = klpce.tensor_gauss_hermite(n_germ, points)
        rule = klpce.tensor_gauss_hermite if z_family == "hermite" else klpce.tensor_gauss_legendre
        pz, wz = rule(n_param, points)
        iy, iz = np.meshgrid(np.arange(len(wy)), np.arange(len(wz)), indexing="ij")
        iy, iz = iy.ravel(), iz.ravel()
        w = wy[iy] * wz[iz]
        return Quadrature(py[iy], z_scale * pz[iz], w / w.sum(), "tensor")
    if rng is None:
        rng = np.random.default_rng(0)
    y = rng.standard_normal((mc_count, n_germ))
    if z_family == "hermite":
        z = z_scale * rng.standard_normal((mc_count, n_param))
    else:
        z = z_scale * rng.uniform(-1.0, 1.0, (mc_count, n_param))
    return Quadrature(y, z, np.full(mc_count, 1.0 / mc_count), "montecarlo")


class ProductBasis:
    """``P_p(R^Ng) (x) P_p(R^nu)`` with orthonormal chaos in each factor,
    constants included.  Column ``iy * Pz + iz`` is ``psi_iy(y) chi_iz(z)``."""

    def __init__(self, n_germ, n_param, degree, z_scale=1.0, z_family="hermite",
                 degree_z=None):
        self.degree = degree
        self.basis_y = ChaosBasis(n_germ, degree, include_constant=True)
        self.basis_z = ChaosBasis(n_param, degree if degree_z is None else degree_z,
                                  include_constant=True, family=z_family, scale=z_scale)

    @classmethod
    def from_parts(cls, basis_y, basis_z):
        obj = cls.__new__(cls)
        obj.degree = max(basis_y.degree, basis_z.degree)
        obj.basis_y = basis_y
        obj.basis_z = basis_z
        return obj

    @property
    def shape(self):
        return self.basis_y.size, self.basis_z.size

    @property
    def size(self):
        return self.basis_y.size * self.basis_z.size

    def factors(self, y, z):
        return self.basis_y.evaluate(y), self.basis_z.evaluate(z)

    def evaluate(self, y, z):
        fy, fz = self.factors(y, z)
        return (fy[:, :, None] * fz[:, None, :]).reshape(len(fy), -1)


# --- solution maps ----------------------------------------------------------

@dataclass
class SolutionMap:
    """Coefficients of ``u_N`` on ``V_q (x) W_p``.

    ``kind`` is ``'dense'`` with ``coeffs`` of shape (n_nodes, Py, Pz), or
    ``'cp'`` with ``factors = (wx (r, n_nodes), wy (r, Py), wz (r, Pz))``.
    ``modifier`` is None, ``'indicator'`` (basis multiplied by
    ``1{gamma <= tau}``) or ``'inverse_sqrt'`` (multiplied by
    ``gamma^-1/2``); both need ``gamma_fn`` to evaluate.
    """

    kind: str
    basis: ProductBasis
    coeffs: np.ndarray = None
    factors: tuple = None
    mesh: object = None
    tau: float = None
    modifier: str = None
    gamma_fn: object = field(default=None, repr=False, compare=False)
    info: dict = field(default_factory=dict)

    @property
    def rank(self):
        return 0 if self.kind == "dense" else len(self.factors[0])

    def modifier_values(self, y, z):
        if self.modifier is None:
            return None
        if self.gamma_fn is None:
            raise InvalidInputError("this map needs the coefficient bound gamma to evaluate")
        gam = self.gamma_fn(y, z)
        if self.modifier == "indicator":
            return (gam <= self.tau).astype(np.float64)
        return 1.0 / np.sqrt(gam)

    def values(self, y, z, rows=None):
        """Nodal values (q, n_nodes), or ``rows @ u`` if an observation
        matrix ``rows`` (k, n_nodes) is given."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[0] == 1 and y.shape[0] > 1:
            z = np.broadcast_to(z, (y.shape[0], z.shape[1]))
        fy, fz = self.basis.factors(y, z)
        if self.kind == "dense":
            c = self.coeffs if rows is None else np.tensordot(rows, self.coeffs, axes=1)
            out = np.einsum("iab,qa,qb->qi", c, fy, fz, optimize=True)
        else:
            wx, wy, wz = self.factors
            if rows is not None:
                wx = wx @ np.asarray(rows).T
            out = ((fy @ wy.T) * (fz @ wz.T)) @ wx
        mod = self.modifier_values(y, z)
        if mod is not None:
            out = out * mod[:, None]
        return out

    def support(self, y, z):
        """Mask of parameters where the truncated map is active."""
        if self.modifier != "indicator":
            return np.ones(len(np.atleast_2d(y)), dtype=bool)
        return self.modifier_values(np.atleast_2d(y), np.atleast_2d(z)) > 0

    def to_dense(self):
        if self.kind == "dense":
            return self
        wx, wy, wz = self.factors
        coeffs = np.einsum("ri,ra,rb->iab", wx, wy, wz)
        return SolutionMap("dense", self.basis, coeffs, None, self.mesh, self.tau,
                           self.modifier, self.gamma_fn, dict(self.info))


def evaluate_map(smap, x, y, z):
    """``u_N(x, y, z)`` at spatial points ``x`` (k, d) for parameters
    (q, Ng), (q, nu); returns (q, k)."""
    if smap.mesh is None:
        raise InvalidInputError("map has no mesh attached")
    rows = smap.mesh.interpolation_matrix(x)
    return smap.values(y, z, rows)


# --- the stochastic problem -------------------------------------------------

def _scatter_nodes(mesh, elem_vals):
    """Sum (..., n_el, d+1) element contributions into (..., n_nodes)."""
    out = np.zeros(elem_vals.shape[:-2] + (mesh.n_nodes,))
    idx = mesh.elements.ravel()
    flat = elem_vals.reshape(elem_vals.shape[:-2] + (-1,))
    for k in range(flat.shape[-1]):
        out[..., idx[k]] += flat[..., k]
    return out


class StochasticProblem:
    """Quadrature-discretized weak problem ``a(u, v) = F(v)``.

    Parameters
    ----------
    mesh : Mesh
    coeff : FixedCoefficient or FieldCoefficient
    load : Load
    quad : Quadrature
    basis : ProductBasis
    tau : float, optional
        Truncation level; basis functions are multiplied by ``1{gamma <= tau}``.
    weighting : {None, 'inverse_sqrt'}
        Multiply basis functions by ``gamma^-1/2``.

    Raises
    ------
    AssemblyError
        If a quadrature sample yields a coefficient below the lower bound.
    """

    def __init__(self, mesh, coeff, load, quad, basis, tau=None, weighting=None):
        self.mesh = mesh
        self.coeff = coeff
        self.load = load
        self.quad = quad
        self.basis = basis
        self.tau = tau
        self.weighting = weighting
        if tau is not None and weighting is not None:
            raise InvalidInputError("use either a truncation level or a weighting")
        self.c, self.gamma = coeff.sample(quad.y, quad.z)
        lam = matalg.eigvalsh(self.c)[..., 0]
        bad = np.flatnonzero(lam.min(axis=1) < coeff.alpha * (1 - SPD_SLACK))
        if bad.size:
            q = int(bad[0])
            raise AssemblyError(
                f"quadrature sample {q} (y={quad.y[q]}, z={quad.z[q]}) has smallest "
                f"eigenvalue {lam[q].min():.4g} below alpha={coeff.alpha:.4g}")
        self.alpha = coeff.alpha
        self.b = load.vector(mesh)
        self.phi_y, self.phi_z = basis.factors(quad.y, quad.z)
        self.modifier = np.ones(quad.size)
        if tau is not None:
            self.modifier = (self.gamma <= tau).astype(np.float64)
        elif weighting == "inverse_sqrt":
            self.modifier = 1.0 / np.sqrt(self.gamma)
        elif weighting is not None:
            raise InvalidInputError(f"unknown weighting {weighting!r}")

    @property
    def phi(self):
        p = (self.phi_y[:, :, None] * self.phi_z[:, None, :]).reshape(self.quad.size, -1)
        return p * self.modifier[:, None]

    # per-sample operations

    def gradients(self, values):
        """Element gradients (q, n_el, d) of nodal values (q, n_nodes)."""
        return np.einsum("qea,ead->qed", values[:, self.mesh.elements], self.mesh.grads)

    def apply_samples(self, values, coeff=None):
        """``K(C_q) v_q`` for every sample (q, n_nodes); boundary rows kept."""
        c = self.c if coeff is None else coeff
        flux = np.einsum("qedf,qef->qed", c, self.gradients(values))
        local = self.mesh.measures[:, None] * np.einsum("qed,ead->qea", flux, self.mesh.grads)
        return _scatter_nodes(self.mesh, local)

    def sample_energy(self, values, power=1):
        """``int grad v . C^power grad v`` per sample."""
        g = self.gradients(values)
        if power == 0:
            inner = np.einsum("qed,qed->qe", g, g)
        else:
            c = self.c if power == 1 else np.linalg.matrix_power(self.c, power)
            inner = np.einsum("qed,qedf,qef->qe", g, c, g)
        return inner @ self.mesh.measures

    def reference_solutions(self):
        """Per-sample deterministic solves at the quadrature nodes."""
        return solve_det_many(self.mesh, self.c, self.b)

    def energy_norms(self, values):
        """Quadrature norms of a function given by its nodal values at the
        quadrature nodes, shape (q, n_nodes).

        Returns a dict with ``X``, ``C``, ``C2``, ``gamma``, ``gammaC`` and
        ``gamma2`` holding ``||v||`` in ``X^(gamma^s C^r)``.
        """
        w = self.quad.weights
        e0 = self.sample_energy(values, 0)
        e1 = self.sample_energy(values, 1)
        e2 = self.sample_energy(values, 2)
        g = self.gamma
        out = {"X": w @ e0, "C": w @ e1, "C2": w @ e2, "gamma": w @ (g * e0),
               "gammaC": w @ (g * e1), "gamma2": w @ (g * g * e0)}
        return {k: float(math.sqrt(max(v, 0.0))) for k, v in out.items()}

    def norm_chain(self, norms):
        """Pairs ``(lhs, rhs)`` of the norm ordering
        ``alpha^1.5 |v|_X <= alpha |v|_C <= |v|_C2 <= |v|_gammaC <= |v|_gamma2``."""
        a = self.alpha
        seq = [a ** 1.5 * norms["X"], a * norms["C"], norms["C2"], norms["gammaC"],
               norms["gamma2"]]
        pairs = [(seq[k], seq[k + 1]) for k in range(4)]
        pairs.append((math.sqrt(a) * norms["X"], norms["C"]))
        pairs.append((norms["C"], norms["gamma"]))
        return pairs

    def stability_check(self, values=None):
        """Ratios ``alpha |u_q|_H1 / |f|_H-1`` per sample (should be <= 1)."""
        if values is None:
            values = self.reference_solutions()
        return self.alpha * np.sqrt(self.sample_energy(values, 0)) / dual_norm(self.mesh, self.b)

    def j_value(self, values):
        """``J(v) = a(v, v)/2 - F(v)`` from nodal values at the nodes."""
        w = self.quad.weights
        return float(0.5 * w @ self.sample_energy(values) - w @ (values @ self.b))

    # Galerkin system

    def _element_matrices(self, phi):
        """``M_{e,rs} = sum_q w_q C_{q,e,rs} phi_q phi_q^T``."""
        n = self.mesh.dim
        q, p = phi.shape
        cw = self.c.reshape(q, -1) * self.quad.weights[:, None]
        out = np.empty((cw.shape[1], p, p))
        for k in range(cw.shape[1]):
            out[k] = (phi * cw[:, k:k + 1]).T @ phi
        return out.reshape(self.mesh.n_elements, n, n, p, p)

    def assemble(self, phi=None):
        """Sparse Galerkin matrix over interior nodes and the load vector.

        Unknowns are ordered node-major: index ``i * P + k``.
        """
        if phi is None:
            phi = self.phi
        mesh = self.mesh
        p = phi.shape[1]
        mats = self._element_matrices(phi)
        g = mesh.grads
        # blocks[e, a, b] = |e| sum_rs g[e,a,r] g[e,b,s] M[e,r,s]
        blocks = np.einsum("e,ear,ebs,erskl->eabkl", mesh.measures, g, g, mats, optimize=True)
        pos = -np.ones(mesh.n_nodes, dtype=np.int64)
        pos[mesh.interior] = np.arange(len(mesh.interior))
        loc = pos[mesh.elements]
        k = np.arange(p)
        rows = loc[:, :, None, None, None] * p + k[None, None, None, :, None]
        cols = loc[:, None, :, None, None] * p + k[None, None, None, None, :]
        rows = np.broadcast_to(rows, blocks.shape)
        cols = np.broadcast_to(cols, blocks.shape)
        ok = np.broadcast_to((loc[:, :, None] >= 0) & (loc[:, None, :] >= 0),
                             blocks.shape[:3])[..., None, None]
        ok = np.broadcast_to(ok, blocks.shape)
        size = len(mesh.interior) * p
        mat = sp.csr_matrix((blocks[ok], (rows[ok], cols[ok])), shape=(size, size))
        mean_phi = self.quad.weights @ phi
        rhs = np.outer(self.b[mesh.interior], mean_phi).ravel()
        return mat, rhs

    def _whitening(self):
        phi = self.phi
        gram = (phi * self.quad.weights[:, None]).T @ phi
        lam, vec = np.linalg.eigh(0.5 * (gram + gram.T))
        keep = lam > 1e-12 * max(lam.max(initial=0.0), 1e-300)
        return vec[:, keep] / np.sqrt(lam[keep]), int(keep.sum())

    def solve(self, tol=CG_TOL, maxiter=None):
        """Galerkin solution as a dense :class:`SolutionMap`.

        The chaos basis is first orthonormalized under the quadrature (which
        also removes functions that vanish on every node, as happens with
        truncation), so the block preconditioner ``K_mean^-1 (x) I`` is exact
        for a deterministic coefficient.
        """
        mesh = self.mesh
        trans, rank = self._whitening()
        phi_w = self.phi @ trans
        n_int = len(mesh.interior)
        py, pz = self.basis.shape
        coeffs = np.zeros((mesh.n_nodes, py * pz))
        info = {"rank": rank, "iterations": 0, "residual": 0.0}
        if rank and n_int:
            mat, rhs = self.assemble(phi_w)
            c_mean = np.tensordot(self.quad.weights, self.c, axes=1)
            lu = spla.splu(_interior_block(stiffness_matrix(mesh, c_mean), mesh).tocsc())

            def precond(r):
                return lu.solve(r.reshape(n_int, rank)).ravel()

            pre = spla.LinearOperator(mat.shape, matvec=precond, dtype=np.float64)
            count = [0]

            def tick(_):
                count[0] += 1

            if np.linalg.norm(rhs) == 0.0:
                sol = np.zeros_like(rhs)
            else:
                sol, flag = spla.cg(mat, rhs, rtol=tol, atol=0.0, M=pre, callback=tick,
                                    maxiter=maxiter or 10 * len(rhs))
                if flag != 0:
                    raise ConvergenceError(f"PCG stopped after {count[0]} iterations")
            res = np.linalg.norm(mat @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
            info.update(iterations=count[0], residual=float(res))
            coeffs[mesh.interior] = sol.reshape(n_int, rank) @ trans.T
        _counter["galerkin"] += 1
        return self.make_map(coeffs=coeffs.reshape(mesh.n_nodes, py, pz), info=info)

    def make_map(self, coeffs=None, factors=None, info=None):
        """Wrap dense coefficients or CP factors as a :class:`SolutionMap`
        carrying this problem's truncation or weighting."""
        modifier = "indicator" if self.tau is not None else self.weighting
        gamma_fn = None
        if modifier is not None:
            def gamma_fn(y, z, coeff=self.coeff):
                return coeff.sample(y, z)[1]
        kind = "dense" if factors is None else "cp"
        return SolutionMap(kind, self.basis, coeffs, factors, mesh=self.mesh, tau=self.tau,
                           modifier=modifier, gamma_fn=gamma_fn, info=info or {})

    def map_values(self, smap):
        """Nodal values of a map at the quadrature nodes, reusing the
        stored basis tables."""
        if smap.kind == "dense":
            out = np.einsum("iab,qa,qb->qi", smap.coeffs, self.phi_y, self.phi_z,
                            optimize=True)
        else:
            wx, wy, wz = smap.factors
            out = ((self.phi_y @ wy.T) * (self.phi_z @ wz.T)) @ wx
        return out * self.modifier[:, None]


def galerkin_solve(mesh, coeff, load, quad, basis, tau=None, weighting=None):
    """Build the quadrature-discretized problem and solve it."""
    prob = StochasticProblem(mesh, coeff, load, quad, basis, tau, weighting)
    return prob.solve()


def energy_error(prob, smap, reference=None):
    """Norms of ``u_ref - u_N`` at the quadrature nodes; by default the
    reference is the per-sample deterministic solution."""
    if reference is None:
        reference = prob.reference_solutions()
    return prob.energy_norms(reference - prob.map_values(smap))


def check_support(smap, quad, y, z):
    """Warn when evaluation points lie outside the quadrature hull."""
    lo = np.concatenate([quad.y.min(axis=0), quad.z.min(axis=0)])
    hi = np.concatenate([quad.y.max(axis=0), quad.z.max(axis=0)])
    pts = np.hstack([np.atleast_2d(y), np.atleast_2d(z)])
    if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
        warnings.warn("evaluating the solution map outside the quadrature support",
                      RuntimeWarning, stacklevel=2)
